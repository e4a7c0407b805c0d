use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative singular-value threshold below which a component carries no
/// variance.
const ZERO_VARIANCE_RTOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub k: usize,
    /// Row-major `n x k` projections of the centred data.
    pub projected: Vec<f64>,
    /// Row-major `k x d` unit principal axes. The largest-magnitude
    /// coordinate of each axis is positive.
    pub components: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// Indices of components with (numerically) zero variance.
    pub zero_variance: Vec<usize>,
}

/// Principal component analysis of a row-major `n x d` matrix via SVD of
/// the centred data.
pub fn pca_reduce(data: &[f64], n: usize, d: usize, k: usize) -> Result<Pca> {
    if data.len() != n * d {
        return Err(Error::invalid(format!("{} values for a {n} x {d} matrix", data.len())));
    }
    if n < 2 || k == 0 || k > d.min(n) {
        return Err(Error::invalid(format!("PCA needs n >= 2 and 1 <= k <= min(n, d), got n={n} d={d} k={k}")));
    }
    let mut x = DMatrix::from_row_slice(n, d, data);
    for mut col in x.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    let svd = x.clone().svd(false, true);
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let s = &svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));

    let total: f64 = s.iter().map(|v| v * v).sum();
    let smax = order.first().map_or(0.0, |&i| s[i]);
    let mut components = Vec::with_capacity(k * d);
    let mut explained_variance_ratio = Vec::with_capacity(k);
    let mut zero_variance = Vec::new();
    for (r, &i) in order.iter().take(k).enumerate() {
        let mut axis: Vec<f64> = vt.row(i).iter().copied().collect();
        let pivot = axis.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        components.extend(axis);
        explained_variance_ratio.push(if total > 0.0 { s[i] * s[i] / total } else { 0.0 });
        if s[i] <= ZERO_VARIANCE_RTOL * smax.max(f64::MIN_POSITIVE) || total == 0.0 {
            zero_variance.push(r);
        }
    }
    let comp = DMatrix::from_row_slice(k, d, &components);
    let proj = &x * comp.transpose();
    let projected = (0..n).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| proj[(i, j)]).collect();
    Ok(Pca {
        k,
        projected,
        components,
        explained_variance_ratio,
        zero_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_on_a_line() {
        // y = 2x: one component carries everything
        let data = [0.0, 0.0, 1.0, 2.0, 2.0, 4.0, 3.0, 6.0];
        let p = pca_reduce(&data, 4, 2, 2).unwrap();
        assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        assert_eq!(p.zero_variance, vec![1]);
        let norm = 5f64.sqrt();
        assert!((p.components[0] - 1.0 / norm).abs() < 1e-12);
        assert!((p.components[1] - 2.0 / norm).abs() < 1e-12);
        // first projection of the centred point (-1.5, -3)
        assert!((p.projected[0] + 1.5 * norm).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_k() {
        assert!(pca_reduce(&[0.0; 6], 3, 2, 3).is_err());
        assert!(pca_reduce(&[0.0; 6], 3, 2, 0).is_err());
    }

    #[test]
    fn constant_data_is_flagged() {
        let p = pca_reduce(&[1.0; 6], 3, 2, 2).unwrap();
        assert_eq!(p.zero_variance, vec![0, 1]);
        assert!(p.projected.iter().all(|v| *v == 0.0));
    }
}
