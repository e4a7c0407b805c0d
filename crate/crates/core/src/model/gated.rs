//! Gated convolution: the masked formulation used for training and the
//! selective formulation that skips gated-off filters.

use crate::error::{Error, Result};
use crate::layers::{
    batch_norm, bn_eval_scalar, conv2d, BatchNormConfig, Conv2dConfig, ConvGeometry, Mode, RunningStats,
};
use crate::tensor::{Graph, Tensor, Var};

/// Multiplies channel `i` of sample `n` of `x: N x C x H x W` by
/// `gates[n, i]`.
pub fn mask_channels(g: &mut Graph, x: Var, gates: Var) -> Result<Var> {
    let &[n, c, h, w] = g.shape(x) else {
        return Err(Error::invalid(format!("mask_channels needs NCHW input, got {:?}", g.shape(x))));
    };
    if g.shape(gates) != [n, c] {
        return Err(Error::ShapeMismatch {
            op: "mask_channels",
            lhs: g.shape(x).to_vec(),
            rhs: g.shape(gates).to_vec(),
        });
    }
    let hw = h * w;
    let gv = g.value(gates).data();
    let mut out = g.value(x).data().to_vec();
    for (plane, gate) in out.chunks_mut(hw).zip(gv) {
        for v in plane {
            *v *= gate;
        }
    }
    let (need_x, need_g) = (g.requires_grad(x), g.requires_grad(gates));
    Ok(g.record(
        "mask_channels",
        Tensor::new(vec![n, c, h, w], out)?,
        vec![x, gates],
        Box::new(move |grad, vals, _| {
            let dy = grad.data();
            let dx = need_x.then(|| {
                let mut d = dy.to_vec();
                for (plane, gate) in d.chunks_mut(hw).zip(vals[1].data()) {
                    for v in plane {
                        *v *= gate;
                    }
                }
                Tensor::new(vec![n, c, h, w], d).expect("shape")
            });
            let dg = need_g.then(|| {
                let d = dy
                    .chunks(hw)
                    .zip(vals[0].data().chunks(hw))
                    .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum())
                    .collect();
                Tensor::new(vec![n, c], d).expect("shape")
            });
            vec![dx, dg]
        }),
    ))
}

/// Batchnorm attached to a convolution.
pub struct BnArgs<'a> {
    pub gamma: Var,
    pub beta: Var,
    pub stats: &'a RunningStats,
    pub cfg: BatchNormConfig,
}

/// `relu(bn(conv(x)))`, then each output channel multiplied by its gate.
///
/// Returns the updated batchnorm running statistics in training mode.
pub fn gated_conv_forward(
    g: &mut Graph,
    input: Var,
    filters: Var,
    bias: Option<Var>,
    cfg: Conv2dConfig,
    bn: Option<BnArgs<'_>>,
    gates: Option<Var>,
    mode: Mode,
) -> Result<(Var, Option<RunningStats>)> {
    if let Some(gv) = gates {
        let out_ch = g.shape(filters)[0];
        let n = g.shape(input)[0];
        if g.shape(gv) != [n, out_ch] {
            return Err(Error::ShapeMismatch {
                op: "gated_conv gates",
                lhs: vec![n, out_ch],
                rhs: g.shape(gv).to_vec(),
            });
        }
    }
    let y = conv2d(g, input, filters, bias, cfg)?;
    let (y, stats) = match bn {
        Some(b) => batch_norm(g, y, b.gamma, b.beta, b.stats, b.cfg, mode)?,
        None => (y, None),
    };
    let y = g.relu(y);
    let y = match gates {
        Some(gv) => mask_channels(g, y, gv)?,
        None => y,
    };
    Ok((y, stats))
}

/// Evaluation-mode batchnorm parameters for [`selective_conv_reference`].
pub struct BnEval<'a> {
    pub gamma: &'a Tensor,
    pub beta: &'a Tensor,
    pub stats: &'a RunningStats,
    pub epsilon: f32,
}

/// Reference gated convolution that only computes filters whose gate is 1
/// and writes an all-zero map for the rest. Gates must be exactly 0 or 1.
/// Batchnorm, when present, uses running statistics.
pub fn selective_conv_reference(
    input: &Tensor,
    filters: &Tensor,
    bias: Option<&Tensor>,
    cfg: Conv2dConfig,
    bn: Option<BnEval<'_>>,
    gates: &Tensor,
) -> Result<Tensor> {
    let geo = ConvGeometry::new(input.shape(), filters.shape(), cfg)?;
    if gates.shape() != [geo.n, geo.out_ch] {
        return Err(Error::ShapeMismatch {
            op: "selective_conv gates",
            lhs: vec![geo.n, geo.out_ch],
            rhs: gates.shape().to_vec(),
        });
    }
    if let Some(bad) = gates.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(format!("selective convolution needs binary gates, got {bad}")));
    }
    let (x, w) = (input.data(), filters.data());
    let mut out = vec![0.0f32; geo.n * geo.out_ch * geo.oh * geo.ow];
    for n in 0..geo.n {
        for o in 0..geo.out_ch {
            if gates.data()[n * geo.out_ch + o] == 0.0 {
                continue;
            }
            for oi in 0..geo.oh {
                for oj in 0..geo.ow {
                    let mut acc = 0.0f32;
                    for ci in 0..geo.c {
                        for ki in 0..geo.kh {
                            let ii = (oi * geo.stride + ki) as isize - geo.pad as isize;
                            if ii < 0 || ii as usize >= geo.h {
                                continue;
                            }
                            for kj in 0..geo.kw {
                                let jj = (oj * geo.stride + kj) as isize - geo.pad as isize;
                                if jj < 0 || jj as usize >= geo.w {
                                    continue;
                                }
                                let xv = x[((n * geo.c + ci) * geo.h + ii as usize) * geo.w + jj as usize];
                                acc += w[((o * geo.c + ci) * geo.kh + ki) * geo.kw + kj] * xv;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b.data()[o];
                    }
                    if let Some(bn) = &bn {
                        acc = bn_eval_scalar(
                            acc,
                            bn.stats.mean.data()[o],
                            bn.stats.var.data()[o],
                            bn.epsilon,
                            bn.gamma.data()[o],
                            bn.beta.data()[o],
                        );
                    }
                    out[((n * geo.out_ch + o) * geo.oh + oi) * geo.ow + oj] = if acc > 0.0 { acc } else { 0.0 };
                }
            }
        }
    }
    Tensor::new(vec![geo.n, geo.out_ch, geo.oh, geo.ow], out)
}
