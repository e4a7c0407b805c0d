//! Central-difference gradient checker.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step. The default `2^-7` keeps `x +- eps` exact
    /// in `f32` for moderate `|x|`, and is large enough that `f32` rounding
    /// of the evaluated function stays well under the checked tolerance.
    pub eps: f64,
    /// Skip coordinates with a breakpoint (relu, saturating-sigmoid clip)
    /// within `eps`. Slopes are measured at `eps` and `eps / 2`: for a smooth
    /// function the one-sided gap halves and the central difference holds.
    /// An undetected kink then costs at most `3 * kink_tolerance`.
    pub skip_kinks: bool,
    /// Allowed deviation from either, relative to `max(1, |slope|)`.
    pub kink_tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1.0 / 128.0,
            skip_kinks: true,
            kink_tolerance: 2e-4,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = f(&mut g, xv)?;
    Ok(g.value(out).item()? as f64)
}

/// Central-difference slope of `f` at `x0`, where `f(v)` evaluates the
/// function with the coordinate set to `v` and `base = f(x0)`. Returns
/// `None` for a detected kink.
pub fn central_difference<F>(mut f: F, x0: f32, base: f64, opts: &GradCheckOptions) -> Result<Option<f64>>
where
    F: FnMut(f32) -> Result<f64>,
{
    let mut slopes = |eps: f64| -> Result<(f64, f64, f64)> {
        let plus = (x0 as f64 + eps) as f32;
        let minus = (x0 as f64 - eps) as f32;
        let (f_plus, f_minus) = (f(plus)?, f(minus)?);
        let (h_plus, h_minus) = (plus as f64 - x0 as f64, x0 as f64 - minus as f64);
        let central = (f_plus - f_minus) / (h_plus + h_minus);
        Ok(((f_plus - base) / h_plus, (base - f_minus) / h_minus, central))
    };
    let (right, left, central) = slopes(opts.eps)?;
    if opts.skip_kinks {
        let (r2, l2, c2) = slopes(opts.eps / 2.0)?;
        let tol = opts.kink_tolerance * 1.0f64.max(right.abs()).max(left.abs());
        if (r2 - l2 - (right - left) / 2.0).abs() > tol || (c2 - central).abs() > tol {
            return Ok(None);
        }
    }
    Ok(Some(central))
}

/// Compares the analytic gradient of scalar-valued `f` at `x` against
/// central differences.
pub fn grad_check<F>(f: F, x: &Tensor, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_with(f, x, opts, |_, _| false)
}

/// Like [`grad_check`], additionally skipping every coordinate for which
/// `exclude(index, value)` holds.
pub fn grad_check_with<F, E>(
    f: F,
    x: &Tensor,
    opts: &GradCheckOptions,
    exclude: E,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
    E: Fn(usize, f32) -> bool,
{
    if !(opts.eps > 0.0) {
        return Err(Error::invalid("gradient check eps must be positive"));
    }

    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = f(&mut g, xv)?;
    let base = g.value(out).item()? as f64;
    g.backward(out)?;
    let analytic = g
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    if eval_scalar(&f, x)?.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut report = GradCheckReport::default();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let x0 = x.data()[i];
        if exclude(i, x0) {
            report.skipped += 1;
            continue;
        }
        let numeric = central_difference(
            |v| {
                probe.data_mut()[i] = v;
                eval_scalar(&f, &probe)
            },
            x0,
            base,
            opts,
        )?;
        probe.data_mut()[i] = x0;
        let Some(numeric) = numeric else {
            report.skipped += 1;
            continue;
        };
        let err = (analytic.data()[i] as f64 - numeric).abs() / 1.0f64.max(numeric.abs());
        report.checked += 1;
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;

    #[test]
    fn identity_sum_is_exact() {
        let x = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(|g, v| Ok(g.sum(v)), &x, &GradCheckOptions::default()).unwrap();
        assert_eq!(r.checked, 4);
        assert_eq!(r.max_rel_error, 0.0, "{r:?}");
    }

    #[test]
    fn relu_kink_is_excluded() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let opts = GradCheckOptions {
            skip_kinks: false,
            ..Default::default()
        };
        let f = |g: &mut Graph, v: Var| {
            let r = g.relu(v);
            Ok(g.sum(r))
        };
        let r = grad_check_with(f, &x, &opts, |_, v| v.abs() < 1e-3).unwrap();
        assert_eq!((r.checked, r.skipped), (2, 1));
        assert!(r.max_rel_error < 1e-6);
        // the automatic detector finds the same kink
        let r = grad_check(f, &x, &GradCheckOptions::default()).unwrap();
        assert_eq!((r.checked, r.skipped), (2, 1));
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        let calls = Cell::new(0.0f32);
        let x = Tensor::ones(vec![2]);
        let f = |g: &mut Graph, v: Var| {
            calls.set(calls.get() + 1.0);
            let s = g.sum(v);
            Ok(g.add_scalar(s, calls.get()))
        };
        assert!(matches!(
            grad_check(f, &x, &GradCheckOptions::default()),
            Err(Error::NonDeterministic)
        ));
    }
}
