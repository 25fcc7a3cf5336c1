use super::Tensor;

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = x.zeros_like();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Element-wise relative error between an analytic and a numeric gradient.
///
/// Elements where both magnitudes are at or below `floor` are skipped.
#[derive(Clone, Debug, Default)]
pub struct GradComparison {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub compared: usize,
    pub skipped: usize,
}

impl GradComparison {
    pub fn new(analytic: &Tensor, numeric: &Tensor, floor: f64) -> Self {
        Self::from_pairs(analytic.data().iter().copied().zip(numeric.data().iter().copied()), floor)
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, f64)>, floor: f64) -> Self {
        let mut cmp = GradComparison::default();
        for (a, n) in pairs {
            let abs = (a - n).abs();
            cmp.max_abs_err = cmp.max_abs_err.max(abs);
            let scale = a.abs().max(n.abs());
            if scale <= floor {
                cmp.skipped += 1;
                continue;
            }
            cmp.compared += 1;
            cmp.max_rel_err = cmp.max_rel_err.max(abs / scale);
        }
        cmp
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::vector(&[1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.sq_norm(), &x, 1e-5);
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::vector(&[3.0, -1.0, 0.5]).unwrap();
        let g = finite_diff_grad(|_| 7.0, &x, 1e-5);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}
