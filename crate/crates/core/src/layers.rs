//! CNN building blocks shared by the backbone and the gater.
//!
//! Convolution is cross-correlation (no kernel flip) with symmetric zero
//! padding. The element-wise nonlinearity is relu throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt, matmul_raw, Graph, Tensor, Var};

/// Training or evaluation behaviour of batchnorm and gate discretization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

/// Geometry of one convolution, derived from input and filter shapes.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], filters: &[usize], cfg: Conv2dConfig) -> Result<Self> {
        let (&[n, c, h, w], &[out_ch, in_ch, kh, kw]) = (input, filters) else {
            return Err(Error::invalid(format!(
                "conv2d needs NCHW input and OIHW filters, got {input:?} and {filters:?}"
            )));
        };
        if c != in_ch {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: filters.to_vec(),
            });
        }
        if out_ch == 0 || kh == 0 || kw == 0 || cfg.stride == 0 {
            return Err(Error::invalid(format!(
                "conv2d needs positive filter count, kernel and stride, got {filters:?} stride {}",
                cfg.stride
            )));
        }
        let (ph, pw) = (h + 2 * cfg.padding, w + 2 * cfg.padding);
        if ph < kh || pw < kw {
            return Err(Error::invalid(format!(
                "conv2d output size is not positive: input {h}x{w}, padding {}, kernel {kh}x{kw}",
                cfg.padding
            )));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            out_ch,
            kh,
            kw,
            stride: cfg.stride,
            pad: cfg.padding,
            oh: (ph - kh) / cfg.stride + 1,
            ow: (pw - kw) / cfg.stride + 1,
        })
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate for output position `o` and kernel offset `k`, or
    /// `None` when it falls into the zero padding.
    #[inline]
    fn source(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }

    /// Unfolds one sample into a `patch_len x out_len` matrix.
    fn im2col(&self, x: &[f32]) -> Vec<f32> {
        let p = self.out_len();
        let mut col = vec![0.0f32; self.patch_len() * p];
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oi in 0..self.oh {
                        let Some(ii) = self.source(oi, ki, self.h) else { continue };
                        for oj in 0..self.ow {
                            if let Some(jj) = self.source(oj, kj, self.w) {
                                dst[oi * self.ow + oj] = x[(ci * self.h + ii) * self.w + jj];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Adjoint of [`Self::im2col`], accumulating into `dx`.
    fn col2im(&self, col: &[f32], dx: &mut [f32]) {
        let p = self.out_len();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for oi in 0..self.oh {
                        let Some(ii) = self.source(oi, ki, self.h) else { continue };
                        for oj in 0..self.ow {
                            if let Some(jj) = self.source(oj, kj, self.w) {
                                dx[(ci * self.h + ii) * self.w + jj] += src[oi * self.ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution of `input: N x C x H x W` with `filters: O x C x KH x KW`
/// and an optional per-filter bias.
///
/// Each output entry accumulates its `C*KH*KW` products in channel, row,
/// column order starting from zero, then adds the bias.
pub fn conv2d(
    g: &mut Graph,
    input: Var,
    filters: Var,
    bias: Option<Var>,
    cfg: Conv2dConfig,
) -> Result<Var> {
    let geo = ConvGeometry::new(g.shape(input), g.shape(filters), cfg)?;
    if let Some(b) = bias {
        if g.shape(b) != [geo.out_ch] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![geo.out_ch],
                rhs: g.shape(b).to_vec(),
            });
        }
    }
    let (k, p) = (geo.patch_len(), geo.out_len());
    let x = g.value(input).data();
    let w = g.value(filters).data();
    let sample_in = geo.c * geo.h * geo.w;
    let sample_out = geo.out_ch * p;

    let mut out = vec![0.0f32; geo.n * sample_out];
    let mut cols = Vec::with_capacity(geo.n);
    for n in 0..geo.n {
        let col = geo.im2col(&x[n * sample_in..(n + 1) * sample_in]);
        let y = matmul_raw(w, &col, geo.out_ch, k, p);
        out[n * sample_out..(n + 1) * sample_out].copy_from_slice(&y);
        cols.push(col);
    }
    if let Some(b) = bias {
        let bv = g.value(b).data();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bv[(i / p) % geo.out_ch];
        }
    }

    let out = Tensor::from_parts(vec![geo.n, geo.out_ch, geo.oh, geo.ow], out);
    let need_x = g.requires_grad(input);
    let need_w = g.requires_grad(filters);
    let mut parents = vec![input, filters];
    parents.extend(bias);
    let has_bias = bias.is_some();
    Ok(g.record(
        "conv2d",
        out,
        parents,
        Box::new(move |grad, vals, _| {
            let dy = grad.data();
            let w = vals[1].data();
            let mut dx = need_x.then(|| vec![0.0f32; geo.n * sample_in]);
            let mut dw = need_w.then(|| vec![0.0f32; w.len()]);
            for n in 0..geo.n {
                let dyn_ = &dy[n * sample_out..(n + 1) * sample_out];
                if let Some(dw) = dw.as_mut() {
                    // dW += dY_n * col_n^T
                    let part = matmul_nt(dyn_, &cols[n], geo.out_ch, p, k);
                    for (a, b) in dw.iter_mut().zip(&part) {
                        *a += b;
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    // dcol = W^T dY_n
                    let dcol = crate::tensor::matmul_tn(w, dyn_, geo.out_ch, k, p);
                    geo.col2im(&dcol, &mut dx[n * sample_in..(n + 1) * sample_in]);
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::from_parts(vals[0].shape().to_vec(), d)),
                dw.map(|d| Tensor::from_parts(vals[1].shape().to_vec(), d)),
            ];
            if has_bias {
                let mut db = vec![0.0f32; geo.out_ch];
                for (i, v) in dy.iter().enumerate() {
                    db[(i / p) % geo.out_ch] += v;
                }
                grads.push(Some(Tensor::from_parts(vec![geo.out_ch], db)));
            }
            grads
        }),
    ))
}

/// Batchnorm hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    /// Weight kept on the old running statistic per update.
    pub momentum: f32,
    pub epsilon: f32,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            epsilon: 1e-5,
        }
    }
}

/// Per-channel running mean and variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(vec![channels]),
            var: Tensor::ones(vec![channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Evaluation-mode normalization of one value. Shared by the graph op and
/// the selective-convolution reference so both round identically.
#[inline]
pub(crate) fn bn_eval_scalar(x: f32, mean: f32, var: f32, eps: f32, gamma: f32, beta: f32) -> f32 {
    (x - mean) / (var + eps).sqrt() * gamma + beta
}

fn bn_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::invalid(format!(
            "batchnorm needs N x C or N x C x H x W input, got {shape:?}"
        ))),
    }
}

/// Batch normalization over the channel axis (axis 1).
///
/// In training mode, normalizes with the biased batch statistics and returns
/// the updated running statistics (exponential moving average, unbiased
/// batch variance). In evaluation mode, normalizes with `stats` and returns
/// `None`. A channel with zero batch variance is normalized by `sqrt(eps)`.
pub fn batch_norm(
    g: &mut Graph,
    input: Var,
    gamma: Var,
    beta: Var,
    stats: &RunningStats,
    cfg: BatchNormConfig,
    mode: Mode,
) -> Result<(Var, Option<RunningStats>)> {
    if !(cfg.epsilon > 0.0) {
        return Err(Error::invalid("batchnorm epsilon must be positive"));
    }
    let (n, c, hw) = bn_layout(g.shape(input))?;
    for (what, v) in [("gamma", gamma), ("beta", beta)] {
        if g.shape(v) != [c] {
            return Err(Error::ShapeMismatch {
                op: if what == "gamma" { "batchnorm gamma" } else { "batchnorm beta" },
                lhs: g.shape(input).to_vec(),
                rhs: g.shape(v).to_vec(),
            });
        }
    }
    if stats.channels() != c {
        return Err(Error::ShapeMismatch {
            op: "batchnorm running stats",
            lhs: g.shape(input).to_vec(),
            rhs: stats.mean.shape().to_vec(),
        });
    }
    let x = g.value(input).data();
    let gm = g.value(gamma).data();
    let bt = g.value(beta).data();
    let idx = move |s: usize, ch: usize, i: usize| (s * c + ch) * hw + i;
    let mut out = vec![0.0f32; x.len()];
    let shape = g.shape(input).to_vec();

    match mode {
        Mode::Eval => {
            let (rm, rv) = (stats.mean.data(), stats.var.data());
            let mut inv_std = vec![0.0f32; c];
            for ch in 0..c {
                inv_std[ch] = 1.0 / (rv[ch] + cfg.epsilon).sqrt();
                for s in 0..n {
                    for i in 0..hw {
                        let j = idx(s, ch, i);
                        out[j] = bn_eval_scalar(x[j], rm[ch], rv[ch], cfg.epsilon, gm[ch], bt[ch]);
                    }
                }
            }
            let rm = rm.to_vec();
            let v = g.record(
                "batchnorm_eval",
                Tensor::from_parts(shape, out),
                vec![input, gamma, beta],
                Box::new(move |grad, vals, _| {
                    let (dy, x, gm) = (grad.data(), vals[0].data(), vals[1].data());
                    let mut dx = vec![0.0f32; dy.len()];
                    let mut dg = vec![0.0f32; c];
                    let mut db = vec![0.0f32; c];
                    for s in 0..n {
                        for ch in 0..c {
                            for i in 0..hw {
                                let j = idx(s, ch, i);
                                dx[j] = dy[j] * gm[ch] * inv_std[ch];
                                dg[ch] += dy[j] * (x[j] - rm[ch]) * inv_std[ch];
                                db[ch] += dy[j];
                            }
                        }
                    }
                    vec![
                        Some(Tensor::from_parts(vals[0].shape().to_vec(), dx)),
                        Some(Tensor::from_parts(vec![c], dg)),
                        Some(Tensor::from_parts(vec![c], db)),
                    ]
                }),
            );
            Ok((v, None))
        }
        Mode::Train => {
            let m = (n * hw) as f64;
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ch in 0..c {
                let mut s1 = 0.0f64;
                for s in 0..n {
                    for i in 0..hw {
                        s1 += x[idx(s, ch, i)] as f64;
                    }
                }
                mean[ch] = s1 / m;
                let mut s2 = 0.0f64;
                for s in 0..n {
                    for i in 0..hw {
                        let d = x[idx(s, ch, i)] as f64 - mean[ch];
                        s2 += d * d;
                    }
                }
                var[ch] = s2 / m;
            }
            let inv_std: Vec<f64> = var
                .iter()
                .map(|v| 1.0 / (v + cfg.epsilon as f64).sqrt())
                .collect();
            let mut xhat = vec![0.0f32; x.len()];
            for s in 0..n {
                for ch in 0..c {
                    for i in 0..hw {
                        let j = idx(s, ch, i);
                        let xh = ((x[j] as f64 - mean[ch]) * inv_std[ch]) as f32;
                        xhat[j] = xh;
                        out[j] = xh * gm[ch] + bt[ch];
                    }
                }
            }

            let mom = cfg.momentum;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let new_stats = RunningStats {
                mean: Tensor::from_parts(
                    vec![c],
                    (0..c)
                        .map(|ch| mom * stats.mean.data()[ch] + (1.0 - mom) * mean[ch] as f32)
                        .collect(),
                ),
                var: Tensor::from_parts(
                    vec![c],
                    (0..c)
                        .map(|ch| mom * stats.var.data()[ch] + (1.0 - mom) * (var[ch] * unbias) as f32)
                        .collect(),
                ),
            };

            let v = g.record(
                "batchnorm_train",
                Tensor::from_parts(shape, out),
                vec![input, gamma, beta],
                Box::new(move |grad, vals, _| {
                    let (dy, gm) = (grad.data(), vals[1].data());
                    let mut dx = vec![0.0f32; dy.len()];
                    let mut dg = vec![0.0f32; c];
                    let mut db = vec![0.0f32; c];
                    for ch in 0..c {
                        let (mut sum_dy, mut sum_dy_xh) = (0.0f64, 0.0f64);
                        for s in 0..n {
                            for i in 0..hw {
                                let j = idx(s, ch, i);
                                sum_dy += dy[j] as f64;
                                sum_dy_xh += dy[j] as f64 * xhat[j] as f64;
                            }
                        }
                        dg[ch] = sum_dy_xh as f32;
                        db[ch] = sum_dy as f32;
                        let k = gm[ch] as f64 * inv_std[ch] / m;
                        for s in 0..n {
                            for i in 0..hw {
                                let j = idx(s, ch, i);
                                let v = m * dy[j] as f64 - sum_dy - xhat[j] as f64 * sum_dy_xh;
                                dx[j] = (k * v) as f32;
                            }
                        }
                    }
                    vec![
                        Some(Tensor::from_parts(vals[0].shape().to_vec(), dx)),
                        Some(Tensor::from_parts(vec![c], dg)),
                        Some(Tensor::from_parts(vec![c], db)),
                    ]
                }),
            );
            Ok((v, Some(new_stats)))
        }
    }
}

/// `N x C x H x W -> N x C` spatial mean.
pub fn global_avg_pool(g: &mut Graph, x: Var) -> Result<Var> {
    let &[n, c, h, w] = g.shape(x) else {
        return Err(Error::invalid(format!(
            "global_avg_pool needs NCHW input, got {:?}",
            g.shape(x)
        )));
    };
    let hw = h * w;
    let data: Vec<f32> = g
        .value(x)
        .data()
        .chunks(hw)
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
        .collect();
    Ok(g.record(
        "global_avg_pool",
        Tensor::from_parts(vec![n, c], data),
        vec![x],
        Box::new(move |grad, _, _| {
            let inv = 1.0 / hw as f32;
            let d = grad
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v * inv, hw))
                .collect();
            vec![Some(Tensor::from_parts(vec![n, c, h, w], d))]
        }),
    ))
}

/// Non-overlapping `size x size` average pooling.
pub fn avg_pool(g: &mut Graph, x: Var, size: usize) -> Result<Var> {
    let &[n, c, h, w] = g.shape(x) else {
        return Err(Error::invalid(format!("avg_pool needs NCHW input, got {:?}", g.shape(x))));
    };
    if size == 0 || h % size != 0 || w % size != 0 {
        return Err(Error::invalid(format!(
            "avg_pool size {size} does not tile a {h}x{w} map"
        )));
    }
    let (oh, ow) = (h / size, w / size);
    let inv = 1.0 / (size * size) as f32;
    let xs = g.value(x).data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    for plane in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0f32;
                for di in 0..size {
                    for dj in 0..size {
                        acc += xs[plane * h * w + (i * size + di) * w + j * size + dj];
                    }
                }
                out[plane * oh * ow + i * ow + j] = acc * inv;
            }
        }
    }
    Ok(g.record(
        "avg_pool",
        Tensor::from_parts(vec![n, c, oh, ow], out),
        vec![x],
        Box::new(move |grad, _, _| {
            let dy = grad.data();
            let mut dx = vec![0.0f32; n * c * h * w];
            for plane in 0..n * c {
                for i in 0..h {
                    for j in 0..w {
                        dx[plane * h * w + i * w + j] =
                            dy[plane * oh * ow + (i / size) * ow + j / size] * inv;
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        }),
    ))
}

/// `x W + b` for `x: N x h`, `W: h x c`, `b: c`.
pub fn fully_connected(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let xw = g.matmul(x, weight)?;
    g.add(xw, bias)
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let &[n, k] = g.shape(logits) else {
        return Err(Error::invalid(format!(
            "softmax_cross_entropy needs N x K logits, got {:?}",
            g.shape(logits)
        )));
    };
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let z = g.value(logits).data();
    let mut probs = vec![0.0f32; n * k];
    let mut total = 0.0f64;
    for (s, &label) in labels.iter().enumerate() {
        let row = &z[s * k..(s + 1) * k];
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let denom: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let log_denom = denom.ln() + max;
        total += log_denom - row[label] as f64;
        for j in 0..k {
            probs[s * k + j] = ((row[j] as f64 - log_denom).exp()) as f32;
        }
    }
    let labels = labels.to_vec();
    Ok(g.record(
        "softmax_cross_entropy",
        Tensor::scalar((total / n as f64) as f32),
        vec![logits],
        Box::new(move |grad, _, _| {
            let scale = grad.data()[0] / n as f32;
            let mut d = probs.clone();
            for (s, &label) in labels.iter().enumerate() {
                d[s * k + label] -= 1.0;
            }
            for v in &mut d {
                *v *= scale;
            }
            vec![Some(Tensor::from_parts(vec![n, k], d))]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn identity_and_zero_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(vec![2, 1, 5, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let id = g.constant(Tensor::ones(vec![1, 1, 1, 1]));
        let y = conv2d(&mut g, xv, id, None, Conv2dConfig::default()).unwrap();
        assert_eq!(g.value(y), &x);

        let zero = g.constant(Tensor::zeros(vec![3, 1, 3, 3]));
        let cfg = Conv2dConfig { stride: 1, padding: 1 };
        let y = conv2d(&mut g, xv, zero, None, cfg).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3, 5, 5]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(vec![3, 1, 3, 3]));
        assert!(matches!(
            conv2d(&mut g, x, w, None, Conv2dConfig::default()),
            Err(Error::ShapeMismatch { .. })
        ));
        let big = g.constant(Tensor::zeros(vec![3, 2, 5, 5]));
        assert!(conv2d(&mut g, x, big, None, Conv2dConfig::default()).is_err());
    }

    #[test]
    fn conv_output_size_formula() {
        let geo = ConvGeometry::new(&[1, 3, 16, 16], &[8, 3, 3, 3], Conv2dConfig { stride: 2, padding: 1 })
            .unwrap();
        assert_eq!((geo.oh, geo.ow), (8, 8));
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(vec![8, 3, 4, 4], 3.0, &mut rng).map(|v| v + 5.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gm = g.constant(Tensor::ones(vec![3]));
        let bt = g.constant(Tensor::zeros(vec![3]));
        let (y, stats) = batch_norm(&mut g, xv, gm, bt, &RunningStats::new(3), BatchNormConfig::default(), Mode::Train)
            .unwrap();
        assert!(stats.is_some());
        let y = g.value(y).data();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..8)
                .flat_map(|s| (0..16).map(move |i| (s * 3 + ch) * 16 + i))
                .map(|j| y[j] as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn batchnorm_zero_gamma_gives_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let xv = g.constant(Tensor::randn(vec![4, 2], 1.0, &mut rng));
        let gm = g.constant(Tensor::zeros(vec![2]));
        let bt = g.constant(Tensor::new(vec![2], vec![0.25, -1.5]).unwrap());
        for mode in [Mode::Train, Mode::Eval] {
            let (y, _) =
                batch_norm(&mut g, xv, gm, bt, &RunningStats::new(2), BatchNormConfig::default(), mode).unwrap();
            for row in g.value(y).data().chunks(2) {
                assert_eq!(row, &[0.25, -1.5]);
            }
        }
    }

    #[test]
    fn batchnorm_eval_direct_formula() {
        // two channels, hand-computed (x - mu) / sqrt(var + eps) * gamma + beta
        let stats = RunningStats {
            mean: Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(),
            var: Tensor::new(vec![2], vec![4.0, 0.25]).unwrap(),
        };
        let cfg = BatchNormConfig::default();
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(vec![2, 2], vec![3.0, -1.0, 0.0, -2.5]).unwrap());
        let gm = g.constant(Tensor::new(vec![2], vec![2.0, 0.5]).unwrap());
        let bt = g.constant(Tensor::new(vec![2], vec![0.1, 1.0]).unwrap());
        let (y, none) = batch_norm(&mut g, xv, gm, bt, &stats, cfg, Mode::Eval).unwrap();
        assert!(none.is_none());
        let oracle = |x: f64, mu: f64, var: f64, gamma: f64, beta: f64| {
            (x - mu) / (var + 1e-5).sqrt() * gamma + beta
        };
        let expected = [
            oracle(3.0, 1.0, 4.0, 2.0, 0.1),
            oracle(-1.0, -2.0, 0.25, 0.5, 1.0),
            oracle(0.0, 1.0, 4.0, 2.0, 0.1),
            oracle(-2.5, -2.0, 0.25, 0.5, 1.0),
        ];
        for (got, want) in g.value(y).data().iter().zip(expected) {
            assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn batchnorm_single_sample_zero_variance() {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let gm = g.constant(Tensor::ones(vec![2]));
        let bt = g.constant(Tensor::new(vec![2], vec![0.5, 0.5]).unwrap());
        let (y, _) =
            batch_norm(&mut g, xv, gm, bt, &RunningStats::new(2), BatchNormConfig::default(), Mode::Train).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn pooling_of_constant_map() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![2, 3, 4, 4], 1.75));
        let p = global_avg_pool(&mut g, x).unwrap();
        assert_eq!(g.value(p).shape(), &[2, 3]);
        assert!(g.value(p).data().iter().all(|&v| v == 1.75));
        let q = avg_pool(&mut g, x, 2).unwrap();
        assert_eq!(g.value(q).shape(), &[2, 3, 2, 2]);
        assert!(g.value(q).data().iter().all(|&v| v == 1.75));
    }

    #[test]
    fn cross_entropy_limits() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros(vec![3, 10]));
        let l = softmax_cross_entropy(&mut g, uniform, &[0, 4, 9]).unwrap();
        assert!((g.value(l).data()[0] as f64 - 10f64.ln()).abs() < 1e-6);

        let mut z = Tensor::zeros(vec![2, 5]);
        z.data_mut()[2] = 50.0;
        z.data_mut()[5 + 4] = 50.0;
        let confident = g.constant(z);
        let l = softmax_cross_entropy(&mut g, confident, &[2, 4]).unwrap();
        assert!(g.value(l).data()[0] < 1e-12);

        assert!(softmax_cross_entropy(&mut g, confident, &[2, 5]).is_err());
    }
}
