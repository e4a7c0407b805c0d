//! Differentiable primitives recorded on a [`Graph`].

use std::ops::Range;

use super::array::{broadcast_binary, reduce_to_shape, Tensor};
use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Plain `m x k` by `k x n` product with a fixed left-to-right accumulation
/// order over `k` for every output entry.
pub(crate) fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T b` for `a: k x m`, `b: k x n`.
pub(crate) fn matmul_tn(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a b^T` for `a: m x k`, `b: n x k`.
pub(crate) fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::invalid(format!("{op} needs a matrix, got shape {s:?}"))),
    }
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        Ok(self.record(
            "add",
            out,
            vec![a, b],
            Box::new(move |g, _, _| {
                vec![Some(reduce_to_shape(g, &sa)), Some(reduce_to_shape(g, &sb))]
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        Ok(self.record(
            "sub",
            out,
            vec![a, b],
            Box::new(move |g, _, _| {
                vec![
                    Some(reduce_to_shape(g, &sa)),
                    Some(reduce_to_shape(&g.map(|v| -v), &sb)),
                ]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
        Ok(self.record(
            "mul",
            out,
            vec![a, b],
            Box::new(move |g, p, _| {
                let (va, vb) = (p[0], p[1]);
                let ga = need_a.then(|| {
                    let full = broadcast_binary("mul", g, vb, |x, y| x * y).expect("shapes checked");
                    reduce_to_shape(&full, va.shape())
                });
                let gb = need_b.then(|| {
                    let full = broadcast_binary("mul", g, va, |x, y| x * y).expect("shapes checked");
                    reduce_to_shape(&full, vb.shape())
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Multiplies every entry by a constant.
    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.record(
            "scale",
            out,
            vec![a],
            Box::new(move |g, _, _| vec![Some(g.map(|v| v * factor))]),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.record("add_scalar", out, vec![a], Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
        Ok(self.record(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            vec![a, b],
            Box::new(move |g, p, _| {
                let ga = need_a
                    .then(|| Tensor::from_parts(vec![m, k], matmul_nt(g.data(), p[1].data(), m, n, k)));
                let gb = need_b
                    .then(|| Tensor::from_parts(vec![k, n], matmul_tn(p[0].data(), g.data(), m, k, n)));
                vec![ga, gb]
            }),
        ))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum() as f32;
        let shape = self.shape(a).to_vec();
        self.record(
            "sum",
            Tensor::scalar(total),
            vec![a],
            Box::new(move |g, _, _| vec![Some(Tensor::full(shape.clone(), g.data()[0]))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f32;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let orig = self.shape(a).to_vec();
        Ok(self.record(
            "reshape",
            out,
            vec![a],
            Box::new(move |g, _, _| vec![Some(g.reshape(orig.clone()).expect("same numel"))]),
        ))
    }

    /// Columns `range` of a matrix.
    pub fn slice_columns(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        let out = self.value(a).columns(range.start, range.end)?;
        let (rows, cols) = matrix_dims("slice_columns", self.value(a))?;
        Ok(self.record(
            "slice_columns",
            out,
            vec![a],
            Box::new(move |g, _, _| {
                let width = range.len();
                let mut full = vec![0.0; rows * cols];
                for r in 0..rows {
                    full[r * cols + range.start..r * cols + range.end]
                        .copy_from_slice(&g.data()[r * width..(r + 1) * width]);
                }
                vec![Some(Tensor::from_parts(vec![rows, cols], full))]
            }),
        ))
    }

    /// Sums a matrix over its columns, `N x c -> N`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = matrix_dims("sum_rows", self.value(a))?;
        let data = self
            .value(a)
            .data()
            .chunks(cols.max(1))
            .map(|r| r.iter().sum())
            .take(rows)
            .collect();
        Ok(self.record(
            "sum_rows",
            Tensor::from_parts(vec![rows], data),
            vec![a],
            Box::new(move |g, _, _| {
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v, cols))
                    .collect();
                vec![Some(Tensor::from_parts(vec![rows, cols], data))]
            }),
        ))
    }

    /// `max(0, x)`, writing `+0.0` for every non-positive input. The
    /// derivative at 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.record(
            "relu",
            out,
            vec![a],
            Box::new(|g, p, _| {
                let grad = g.zip_map(p[0], |gv, x| if x > 0.0 { gv } else { 0.0 });
                vec![Some(grad.expect("same shape"))]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.record(
            "sigmoid",
            out,
            vec![a],
            Box::new(|g, _, y| {
                let grad = g.zip_map(y, |gv, s| gv * s * (1.0 - s));
                vec![Some(grad.expect("same shape"))]
            }),
        )
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn masking_and_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[1., 2., 3.]));
        let m = g.constant(t(&[3], &[0., 1., 1.]));
        let out = g.mul(a, m).unwrap();
        assert_eq!(g.value(out).data(), &[0., 2., 3.]);

        let a = g.constant(t(&[2], &[1., 2.]));
        let z = g.constant(Tensor::scalar(0.0));
        let out = g.add(a, z).unwrap();
        assert_eq!(g.value(out).data(), &[1., 2.]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2]));
        let err = g.mul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");

        let c = g.constant(Tensor::zeros(vec![3, 4]));
        assert!(g.matmul(a, a).is_err());
        assert!(g.matmul(a, c).is_ok());
    }

    #[test]
    fn matmul_small_cases() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let ones = g.constant(t(&[2, 1], &[1., 1.]));
        let out = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 1]);
        assert_eq!(g.value(out).data(), &[3., 7.]);
        let id = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let out = g.matmul(id, a).unwrap();
        assert_eq!(g.value(out).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn backward_simple_losses() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[3], &[1., -2., 0.5]));
        let s = g.sum(a);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1., 1., 1.]);

        let sq = g.mul(a, a).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[2., -4., 1.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::ones(vec![2]));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[-1., 0., 2.]));
        let r = g.relu(a);
        assert_eq!(g.value(r).data(), &[0., 0., 2.]);
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).data(), &[0.5]);
    }

    #[test]
    fn slice_columns_scatters_grad() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let s = g.slice_columns(a, 1..3).unwrap();
        assert_eq!(g.value(s).data(), &[2., 3., 5., 6.]);
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[0., 1., 1., 0., 1., 1.]);
    }

    #[test]
    fn reachability_ignores_constant_paths() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::ones(vec![2]));
        let v = g.leaf(Tensor::ones(vec![2]));
        let c = g.constant(Tensor::ones(vec![2]));
        let x = g.mul(w, c).unwrap();
        let y = g.mul(v, c).unwrap();
        let lx = g.sum(x);
        let ly = g.sum(y);
        let total = g.add(lx, ly).unwrap();
        assert_eq!(g.reachable_leaves(lx), vec![w]);
        assert_eq!(g.reachable_leaves(total), vec![w, v]);
    }
}
