use super::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing autograd against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8)`
    pub max_rel_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Central-difference check of `f`'s gradient at `point`, one coordinate at a time.
pub fn finite_diff_check<F>(f: F, point: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("finite difference step must be positive, got {h}")));
    }
    let shape = point.shape().to_vec();
    let base = point.to_vec();
    let eval = |data: Vec<f64>| -> Result<f64> { f(&Tensor::from_vec(&shape, data)?)?.item() };

    let first = eval(base.clone())?;
    let second = eval(base.clone())?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(format!("f(point) gave {first} then {second}")));
    }

    let leaf = Tensor::from_vec(&shape, base.clone())?.requires_grad();
    let out = f(&leaf)?;
    out.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; base.len()]);

    let mut numeric = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let up = eval(probe.clone())?;
        probe[i] = base[i] - h;
        let down = eval(probe.clone())?;
        probe[i] = base[i];
        numeric.push((up - down) / (2.0 * h));
    }

    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max);
    Ok(GradCheck { max_rel_error, analytic, numeric })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::from_vec(&[4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let x = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = finite_diff_check(|x| Ok(x.mul(&w)?.sum()), &x, 1e-5).unwrap();
        assert!(c.max_rel_error < 1e-8, "{}", c.max_rel_error);
    }

    #[test]
    fn sigmoid_sum_is_tight() {
        let x = Tensor::from_vec(&[6], vec![-2.0, -0.7, 0.1, 0.4, 1.3, 2.9]).unwrap();
        let c = finite_diff_check(|x| Ok(x.sigmoid()?.sum()), &x, 1e-5).unwrap();
        assert!(c.max_rel_error < 1e-6, "{}", c.max_rel_error);
    }

    #[test]
    fn detects_non_determinism() {
        let calls = AtomicUsize::new(0);
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let r = finite_diff_check(
            |x| {
                let k = calls.fetch_add(1, Ordering::Relaxed) as f64;
                Ok(x.scale(1.0 + k).sum())
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonDeterministic(_))));
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::zeros(&[1]);
        assert!(finite_diff_check(|x| Ok(x.sum()), &x, 0.0).is_err());
    }
}
