//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gaternet::analyze::GateLog;
use gaternet::layers::{
    avg_pool, batch_norm, conv2d, fully_connected, global_avg_pool, softmax_cross_entropy, BatchNormConfig,
    Conv2dConfig, Mode, RunningStats,
};
use gaternet::model::{mask_channels, ForwardOptions, GaterNet, LayerSpec, ModelSpec};
use gaternet::semhash::{saturating_sigmoid, semhash_gates, Branch};
use gaternet::tensor::{central_difference, grad_check, GradCheckOptions, Graph, Tensor, Var};
use gaternet::train::{total_loss, BatchReduction};
use gaternet::Result;

pub const GRAD_REL_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Six nested loops over output and kernel coordinates; padding taps are
/// skipped rather than multiplied by zero.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [o, _, kh, kw] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f32; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0f32;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                acc += w.data()[((oi * c + ci) * kh + ky) * kw + kx] * xv;
                            }
                        }
                    }
                    if let Some(b) = b {
                        acc += b.data()[oi];
                    }
                    out[((ni * o + oi) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

/// `sum(out * r)` for a fixed random `r`, so every output entry matters.
pub fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let r = Tensor::randn(g.shape(out).to_vec(), 1.0, &mut rng(seed ^ 0x5eed));
    let rv = g.constant(r);
    let m = g.mul(out, rv)?;
    Ok(g.sum(m))
}

pub type ScalarFn = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

/// One differentiable operation, checked with respect to `input`.
pub struct OpCase {
    pub name: String,
    pub input: Tensor,
    pub f: ScalarFn,
}

fn case(name: &str, input: Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name: name.to_string(),
        input,
        f: Box::new(f),
    }
}

/// Every differentiable operation of the library, with random operands drawn
/// from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let mut t = |shape: &[usize], std: f32| Tensor::randn(shape.to_vec(), std, &mut r);
    let (a34, b4, b34) = (t(&[3, 4], 1.0), t(&[4], 1.0), t(&[3, 4], 1.0));
    let (m35, m52) = (t(&[3, 5], 1.0), t(&[5, 2], 1.0));
    let img = t(&[2, 3, 5, 5], 1.0);
    let filt = t(&[4, 3, 3, 3], 0.5);
    let bias4 = t(&[4], 0.3);
    let fmap = t(&[3, 4, 4, 4], 1.0);
    let gamma = t(&[4], 1.0).map(|v| v + 1.0);
    let beta = t(&[4], 0.5);
    let stats = RunningStats {
        mean: t(&[4], 0.3),
        var: t(&[4], 0.3).map(|v| v.abs() + 0.5),
    };
    let fc_x = t(&[3, 6], 1.0);
    let fc_w = t(&[6, 5], 0.5);
    let fc_b = t(&[5], 0.2);
    let logits = t(&[4, 5], 2.0);
    let gates = t(&[3, 4], 1.0).map(|v| v.abs().min(1.0));
    let pre = t(&[3, 6], 1.5);
    let s = seed;
    let bn_cfg = BatchNormConfig::default();
    let conv_cfg = Conv2dConfig { stride: 2, padding: 1 };

    let mut cases = vec![
        case("add", a34.clone(), {
            let b = b4.clone();
            move |g, x| {
                let c = g.constant(b.clone());
                let y = g.add(x, c)?;
                probe(g, y, s)
            }
        }),
        case("add (broadcast operand)", b4.clone(), {
            let a = a34.clone();
            move |g, x| {
                let c = g.constant(a.clone());
                let y = g.add(c, x)?;
                probe(g, y, s)
            }
        }),
        case("sub", a34.clone(), {
            let b = b34.clone();
            move |g, x| {
                let c = g.constant(b.clone());
                let y = g.sub(c, x)?;
                probe(g, y, s)
            }
        }),
        case("mul", a34.clone(), {
            let b = b4.clone();
            move |g, x| {
                let c = g.constant(b.clone());
                let y = g.mul(x, c)?;
                probe(g, y, s)
            }
        }),
        case("mul (self)", a34.clone(), move |g, x| {
            let y = g.mul(x, x)?;
            probe(g, y, s)
        }),
        case("scale", a34.clone(), move |g, x| {
            let y = g.scale(x, -1.75);
            probe(g, y, s)
        }),
        case("add_scalar", a34.clone(), move |g, x| {
            let y = g.add_scalar(x, 0.3);
            probe(g, y, s)
        }),
        case("matmul (left)", m35.clone(), {
            let b = m52.clone();
            move |g, x| {
                let c = g.constant(b.clone());
                let y = g.matmul(x, c)?;
                probe(g, y, s)
            }
        }),
        case("matmul (right)", m52.clone(), {
            let a = m35.clone();
            move |g, x| {
                let c = g.constant(a.clone());
                let y = g.matmul(c, x)?;
                probe(g, y, s)
            }
        }),
        case("sum", a34.clone(), move |g, x| {
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        }),
        case("mean", a34.clone(), move |g, x| {
            let sq = g.mul(x, x)?;
            Ok(g.mean(sq))
        }),
        case("reshape", a34.clone(), move |g, x| {
            let y = g.reshape(x, vec![2, 6])?;
            probe(g, y, s)
        }),
        case("slice_columns", a34.clone(), move |g, x| {
            let y = g.slice_columns(x, 1..3)?;
            probe(g, y, s)
        }),
        case("sum_rows", a34.clone(), move |g, x| {
            let y = g.sum_rows(x)?;
            probe(g, y, s)
        }),
        case("relu", a34.clone(), move |g, x| {
            let y = g.relu(x);
            probe(g, y, s)
        }),
        case("sigmoid", a34.clone(), move |g, x| {
            let y = g.sigmoid(x);
            probe(g, y, s)
        }),
        case("saturating_sigmoid", pre.clone(), move |g, x| {
            let y = saturating_sigmoid(g, x);
            probe(g, y, s)
        }),
        case("conv2d (input)", img.clone(), {
            let (w, b) = (filt.clone(), bias4.clone());
            move |g, x| {
                let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
                let y = conv2d(g, x, wv, Some(bv), conv_cfg)?;
                probe(g, y, s)
            }
        }),
        case("conv2d (filters)", filt.clone(), {
            let (xi, b) = (img.clone(), bias4.clone());
            move |g, w| {
                let (xv, bv) = (g.constant(xi.clone()), g.constant(b.clone()));
                let y = conv2d(g, xv, w, Some(bv), conv_cfg)?;
                probe(g, y, s)
            }
        }),
        case("conv2d (bias)", bias4.clone(), {
            let (xi, w) = (img.clone(), filt.clone());
            move |g, b| {
                let (xv, wv) = (g.constant(xi.clone()), g.constant(w.clone()));
                let y = conv2d(g, xv, wv, Some(b), conv_cfg)?;
                probe(g, y, s)
            }
        }),
    ];

    for mode in [Mode::Train, Mode::Eval] {
        let tag = if mode == Mode::Train { "train" } else { "eval" };
        let (gm, bt, st) = (gamma.clone(), beta.clone(), stats.clone());
        cases.push(case(&format!("batch_norm {tag} (input)"), fmap.clone(), move |g, x| {
            let (gv, bv) = (g.constant(gm.clone()), g.constant(bt.clone()));
            let (y, _) = batch_norm(g, x, gv, bv, &st, bn_cfg, mode)?;
            probe(g, y, s)
        }));
        let (xi, bt, st) = (fmap.clone(), beta.clone(), stats.clone());
        cases.push(case(&format!("batch_norm {tag} (gamma)"), gamma.clone(), move |g, gm| {
            let (xv, bv) = (g.constant(xi.clone()), g.constant(bt.clone()));
            let (y, _) = batch_norm(g, xv, gm, bv, &st, bn_cfg, mode)?;
            probe(g, y, s)
        }));
        let (xi, gm, st) = (fmap.clone(), gamma.clone(), stats.clone());
        cases.push(case(&format!("batch_norm {tag} (beta)"), beta.clone(), move |g, bt| {
            let (xv, gv) = (g.constant(xi.clone()), g.constant(gm.clone()));
            let (y, _) = batch_norm(g, xv, gv, bt, &st, bn_cfg, mode)?;
            probe(g, y, s)
        }));
    }
    let (gm, bt, st) = (gamma.clone(), beta.clone(), stats.clone());
    cases.push(case("batch_norm train (N x C input)", a34.clone(), move |g, x| {
        let (gv, bv) = (g.constant(gm.clone()), g.constant(bt.clone()));
        let (y, _) = batch_norm(g, x, gv, bv, &st, bn_cfg, Mode::Train)?;
        probe(g, y, s)
    }));

    cases.extend([
        case("global_avg_pool", fmap.clone(), move |g, x| {
            let y = global_avg_pool(g, x)?;
            probe(g, y, s)
        }),
        case("avg_pool", fmap.clone(), move |g, x| {
            let y = avg_pool(g, x, 2)?;
            probe(g, y, s)
        }),
        case("fully_connected (input)", fc_x.clone(), {
            let (w, b) = (fc_w.clone(), fc_b.clone());
            move |g, x| {
                let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
                let y = fully_connected(g, x, wv, bv)?;
                probe(g, y, s)
            }
        }),
        case("fully_connected (weight)", fc_w.clone(), {
            let (xi, b) = (fc_x.clone(), fc_b.clone());
            move |g, w| {
                let (xv, bv) = (g.constant(xi.clone()), g.constant(b.clone()));
                let y = fully_connected(g, xv, w, bv)?;
                probe(g, y, s)
            }
        }),
        case("fully_connected (bias)", fc_b.clone(), {
            let (xi, w) = (fc_x.clone(), fc_w.clone());
            move |g, b| {
                let (xv, wv) = (g.constant(xi.clone()), g.constant(w.clone()));
                let y = fully_connected(g, xv, wv, b)?;
                probe(g, y, s)
            }
        }),
        case("softmax_cross_entropy", logits.clone(), move |g, x| softmax_cross_entropy(g, x, &[0, 4, 2, 2])),
        case("mask_channels (input)", fmap.clone(), {
            let gt = gates.clone();
            move |g, x| {
                let gv = g.constant(gt.clone());
                let y = mask_channels(g, x, gv)?;
                probe(g, y, s)
            }
        }),
        case("mask_channels (gates)", gates.clone(), {
            let xi = fmap.clone();
            move |g, gt| {
                let xv = g.constant(xi.clone());
                let y = mask_channels(g, xv, gt)?;
                probe(g, y, s)
            }
        }),
        case("semhash train, alpha route", pre.clone(), move |g, x| {
            let (y, _) = semhash_gates(g, x, Mode::Train, &mut rng(s ^ 77), Some(Branch::Alpha))?;
            probe(g, y, s)
        }),
        case("gate penalty", gates.clone(), move |g, gt| {
            let lg = g.constant(Tensor::zeros(vec![3, 2]));
            let t = total_loss(g, lg, &[0, 1, 0], Some(gt), 0.7, BatchReduction::Mean)?;
            Ok(t.total)
        }),
    ]);
    cases
}

/// Small gated model for composite checks.
pub fn tiny_spec() -> ModelSpec {
    ModelSpec {
        input_channels: 3,
        input_size: 8,
        num_classes: 4,
        backbone: vec![
            LayerSpec::gated_conv(4),
            LayerSpec::gated_conv(6).with_stride(2),
            LayerSpec::conv(6),
        ],
        gater: vec![LayerSpec::conv(4).with_stride(2), LayerSpec::conv(6)],
        bottleneck: 3,
    }
}

/// Full training loss of `net` on `(x, labels)` with the alpha route forced
/// and the noise drawn from `noise_seed`.
pub fn composite_loss(net: &GaterNet, g: &mut Graph, x: Var, labels: &[usize], lambda: f32, noise_seed: u64) -> Result<(Var, gaternet::model::ForwardOutput)> {
    let opts = ForwardOptions::train().force_branch(Branch::Alpha);
    let out = net.forward(g, x, &opts, &mut rng(noise_seed))?;
    let t = total_loss(g, out.logits, labels, out.gates.as_ref().map(|p| p.gates), lambda, BatchReduction::Mean)?;
    Ok((t.total, out))
}

/// Composite check with respect to the input image.
pub fn composite_input_case(seed: u64) -> OpCase {
    let net = GaterNet::new(tiny_spec(), seed).unwrap();
    let x = Tensor::randn(vec![3, 3, 8, 8], 1.0, &mut rng(seed + 1000));
    case("GaterNet composite (input)", x, move |g, xv| Ok(composite_loss(&net, g, xv, &[0, 3, 1], 0.5, seed)?.0))
}

/// Central-difference check of the composite loss with respect to named
/// parameters, on up to `coords` random smooth coordinates each. Returns
/// `(parameter, max relative error, checked, skipped)`.
pub fn composite_param_check(seed: u64, names: &[&str], coords: usize) -> Vec<(String, f64, usize, usize)> {
    let net = GaterNet::new(tiny_spec(), seed).unwrap();
    let x = Tensor::randn(vec![3, 3, 8, 8], 1.0, &mut rng(seed + 1000));
    let labels = [0, 3, 1];
    let loss_of = |n: &GaterNet| -> f64 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (l, _) = composite_loss(n, &mut g, xv, &labels, 0.5, seed).unwrap();
        g.value(l).item().unwrap() as f64
    };
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (l, out) = composite_loss(&net, &mut g, xv, &labels, 0.5, seed).unwrap();
    g.backward(l).unwrap();
    let grads = out.bound.grads(&g);
    let opts = GradCheckOptions::default();
    let mut pick = rng(seed ^ 0xc0de);
    let mut report = Vec::new();
    for name in names {
        let id = net.store().find(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let value = net.store().get(id).value.clone();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
        let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
        // kink-dense parameters need more draws to find smooth coordinates
        for _ in 0..8 * coords {
            if checked == coords {
                break;
            }
            let i = pick.random_range(0..value.len());
            let at = |v: f32| -> Result<f64> {
                let mut n = net.clone();
                let mut t = value.clone();
                t.data_mut()[i] = v;
                n.store_mut().set_by_name(name, t)?;
                Ok(loss_of(&n))
            };
            let Some(numeric) = central_difference(at, value.data()[i], loss_of(&net), &opts).unwrap() else {
                skipped += 1;
                continue;
            };
            let err = (analytic.data()[i] as f64 - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
            checked += 1;
        }
        report.push((name.to_string(), worst, checked, skipped));
    }
    report
}

pub const COMPOSITE_PARAMS: &[&str] = &[
    "backbone.conv0.weight",
    "backbone.bn1.gamma",
    "backbone.fc.weight",
    "gater.conv0.weight",
    "head.fc1.weight",
    "head.fc2.weight",
    "head.fc2.bias",
];

/// Runs `grad_check` on every case; returns `(name, report)` pairs.
pub fn run_cases(cases: Vec<OpCase>) -> Vec<(String, gaternet::tensor::GradCheckReport)> {
    cases
        .into_iter()
        .map(|c| {
            let r = grad_check(&c.f, &c.input, &GradCheckOptions::default())
                .unwrap_or_else(|e| panic!("{}: {e}", c.name));
            (c.name, r)
        })
        .collect()
}

/// Random gate log with per-gate firing probabilities that include
/// always-on and always-off gates.
pub fn random_gate_log(seed: u64, n: usize, layers: &[usize]) -> GateLog {
    let mut r = rng(seed);
    let layer_ids: Vec<u32> = layers.iter().enumerate().flat_map(|(l, &k)| std::iter::repeat(l as u32).take(k)).collect();
    let c = layer_ids.len();
    let probs: Vec<f64> = (0..c)
        .map(|_| match r.random_range(0..4) {
            0 => 0.0,
            1 => 1.0,
            _ => r.random::<f64>(),
        })
        .collect();
    let gates = (0..n * c).map(|i| r.random_bool(probs[i % c]) as u8).collect();
    let labels = (0..n).map(|_| r.random_range(0..10)).collect();
    GateLog::new(gates, labels, layer_ids).unwrap()
}
