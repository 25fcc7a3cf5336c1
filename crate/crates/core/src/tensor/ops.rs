use super::Tensor;
use crate::error::{Error, Result};

fn require_rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *t.dims() {
        [m, n] => Ok((m, n)),
        _ => Err(Error::shape(op, t.dims(), &[0, 0])),
    }
}

/// `a[m,k] · b[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_rank2(a, "matmul")?;
    let (k2, n) = require_rank2(b, "matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", a.dims(), b.dims()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let bd = b.data();
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Backward of [`matmul`]: `(∇a, ∇b) = (∇out·bᵀ, aᵀ·∇out)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, d_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, _) = require_rank2(a, "matmul_backward")?;
    let (_, n) = require_rank2(b, "matmul_backward")?;
    if d_out.dims() != [m, n] {
        return Err(Error::shape("matmul_backward", d_out.dims(), &[m, n]));
    }
    let da = linear(d_out, b)?;
    let db = transpose_matmul(a, d_out)?;
    Ok((da, db))
}

/// `x[m,k] · w[n,k]ᵀ`: the projection used by every weight stored as
/// `[out, in]`.
pub fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (m, k) = require_rank2(x, "linear")?;
    let (n, k2) = require_rank2(w, "linear")?;
    if k != k2 {
        return Err(Error::shape("linear", x.dims(), w.dims()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let xr = x.row(i);
        let orow = out.row_mut(i);
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(xr, w.row(j));
        }
    }
    Ok(out)
}

/// Backward of [`linear`], accumulating `∇w += ∇yᵀ·x` and returning `∇x = ∇y·w`.
pub fn linear_backward(x: &Tensor, w: &Tensor, d_y: &Tensor, d_w: &mut Tensor) -> Result<Tensor> {
    accumulate_transpose_matmul(d_y, x, d_w)?;
    matmul(d_y, w)
}

/// `a[m,p]ᵀ · b[m,q]` → `[p,q]`.
pub fn transpose_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, p) = require_rank2(a, "transpose_matmul")?;
    let (_, q) = require_rank2(b, "transpose_matmul")?;
    let mut out = Tensor::zeros(&[p, q]);
    accumulate_transpose_matmul(a, b, &mut out)?;
    Ok(out)
}

fn accumulate_transpose_matmul(a: &Tensor, b: &Tensor, out: &mut Tensor) -> Result<()> {
    let (m, p) = require_rank2(a, "transpose_matmul")?;
    let (m2, q) = require_rank2(b, "transpose_matmul")?;
    if m != m2 || out.dims() != [p, q] {
        return Err(Error::shape("transpose_matmul", a.dims(), b.dims()));
    }
    for r in 0..m {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            axpy(av, brow, out.row_mut(i));
        }
    }
    Ok(())
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

fn axis_split(dims: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= dims.len() {
        return Err(Error::Index {
            what: "softmax axis",
            index: axis,
            limit: dims.len(),
        });
    }
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    Ok((outer, dims[axis], inner))
}

/// Max-subtracted softmax of a single slice, written into `out`.
pub fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// In-place softmax backward for one slice: `∇x = s ⊙ (∇s − ⟨∇s, s⟩)`.
pub fn softmax_backward_slice(s: &[f64], ds: &[f64], dx: &mut [f64]) {
    let inner = dot(s, ds);
    for ((d, &sv), &g) in dx.iter_mut().zip(s).zip(ds) {
        *d = sv * (g - inner);
    }
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    x.check_finite("softmax input")?;
    let (outer, n, inner) = axis_split(x.dims(), axis)?;
    let mut out = x.zeros_like();
    let mut buf = vec![0.0; n];
    let mut res = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for k in 0..n {
                buf[k] = x.data()[base + k * inner];
            }
            softmax_slice(&buf, &mut res);
            for k in 0..n {
                out.data_mut()[base + k * inner] = res[k];
            }
        }
    }
    Ok(out)
}

/// Backward of [`softmax`] given its output `s`.
pub fn softmax_backward(s: &Tensor, d_s: &Tensor, axis: usize) -> Result<Tensor> {
    if s.dims() != d_s.dims() {
        return Err(Error::shape("softmax_backward", s.dims(), d_s.dims()));
    }
    let (outer, n, inner) = axis_split(s.dims(), axis)?;
    let mut dx = s.zeros_like();
    let (mut sb, mut gb, mut rb) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for k in 0..n {
                sb[k] = s.data()[base + k * inner];
                gb[k] = d_s.data()[base + k * inner];
            }
            softmax_backward_slice(&sb, &gb, &mut rb);
            for k in 0..n {
                dx.data_mut()[base + k * inner] = rb[k];
            }
        }
    }
    Ok(dx)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GeLU.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = gelu_scalar(*v);
    }
    out
}

pub fn gelu_backward(x: &Tensor, d_y: &Tensor) -> Tensor {
    let mut dx = d_y.clone();
    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        *d *= gelu_grad_scalar(xv);
    }
    dx
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row statistics kept for the layer-norm backward.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    let d = x.cols();
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::shape("layer_norm", x.dims(), gain.dims()));
    }
    let rows = x.rows();
    let mut normalized = x.zeros_like();
    let mut out = x.zeros_like();
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(istd);
        let nr = normalized.row_mut(r);
        for (n, &v) in nr.iter_mut().zip(xr) {
            *n = (v - mean) * istd;
        }
        let nr = normalized.row(r).to_vec();
        for ((o, n), (g, b)) in out
            .row_mut(r)
            .iter_mut()
            .zip(&nr)
            .zip(gain.data().iter().zip(bias.data()))
        {
            *o = n * g + b;
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Returns `∇x` and accumulates into `d_gain`/`d_bias`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    d_y: &Tensor,
    d_gain: &mut Tensor,
    d_bias: &mut Tensor,
) -> Tensor {
    let d = d_y.cols();
    let mut dx = d_y.zeros_like();
    let mut dn = vec![0.0; d];
    for r in 0..d_y.rows() {
        let nr = cache.normalized.row(r);
        let gr = d_y.row(r);
        for k in 0..d {
            d_gain.data_mut()[k] += gr[k] * nr[k];
            d_bias.data_mut()[k] += gr[k];
            dn[k] = gr[k] * gain.data()[k];
        }
        let mean_dn = dn.iter().sum::<f64>() / d as f64;
        let mean_dn_n = dot(&dn, nr) / d as f64;
        let istd = cache.inv_std[r];
        for (k, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = istd * (dn[k] - mean_dn - nr[k] * mean_dn_n);
        }
    }
    dx
}

fn check_targets(logits: &Tensor, targets: &[usize]) -> Result<()> {
    if logits.rows() != targets.len() {
        return Err(Error::shape("cross_entropy", logits.dims(), &[targets.len()]));
    }
    let v = logits.cols();
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::Index {
            what: "cross_entropy target",
            index: bad,
            limit: v,
        });
    }
    Ok(())
}

/// Negative log-likelihood of `target` under one row of logits.
pub fn token_nll(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    lse - logits[target]
}

/// Mean token NLL over the rows of `logits`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    check_targets(logits, targets)?;
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| token_nll(logits.row(r), t))
        .sum();
    Ok(total / targets.len() as f64)
}

/// `∇logits = (softmax − onehot) / t`.
pub fn cross_entropy_backward(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    check_targets(logits, targets)?;
    let scale = 1.0 / targets.len() as f64;
    let mut grad = logits.zeros_like();
    let mut probs = vec![0.0; logits.cols()];
    for (r, &t) in targets.iter().enumerate() {
        softmax_slice(logits.row(r), &mut probs);
        let gr = grad.row_mut(r);
        for (g, p) in gr.iter_mut().zip(&probs) {
            *g = p * scale;
        }
        gr[t] -= scale;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn assert_close(analytic: &Tensor, numeric: &Tensor, tol: f64) {
        let cmp = crate::tensor::GradComparison::new(analytic, numeric, 1e-8);
        assert!(cmp.max_rel_err < tol, "{cmp:?}");
    }

    #[test]
    fn matmul_identity_and_dot() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap(), b);
        let row = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let col = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_identity_left_is_exact_on_random() {
        let a = random(&[5, 7], 3);
        let mut eye = Tensor::zeros(&[5, 5]);
        for i in 0..5 {
            eye.data_mut()[i * 5 + i] = 1.0;
        }
        assert_eq!(matmul(&eye, &a).unwrap(), a);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let a = random(&[3, 4], 1);
        let b = random(&[4, 2], 2);
        let w = random(&[3, 2], 9);
        let loss = |a: &Tensor, b: &Tensor| dot(matmul(a, b).unwrap().data(), w.data());
        let (da, db) = matmul_backward(&a, &b, &w).unwrap();
        let na = finite_diff_grad(|x| loss(x, &b), &a, 1e-5);
        let nb = finite_diff_grad(|x| loss(&a, x), &b, 1e-5);
        assert_close(&da, &na, 1e-8);
        assert_close(&db, &nb, 1e-8);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(&[0.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::vector(&[1.0, 2.0, 3.0]).unwrap(), 0).unwrap();
        for (got, want) in s.data().iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert!((got - want).abs() < 1e-8);
        }
        let s = softmax(&Tensor::vector(&[1000.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::vector(&[1.0, f64::NAN]).unwrap();
        assert!(matches!(softmax(&x, 0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_over_leading_axis() {
        let x = random(&[3, 4], 5);
        let s = softmax(&x, 0).unwrap();
        for c in 0..4 {
            let col: f64 = (0..3).map(|r| s.data()[r * 4 + c]).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
        let w = random(&[3, 4], 6);
        let ds = softmax_backward(&s, &w, 0).unwrap();
        let num = finite_diff_grad(|x| dot(softmax(x, 0).unwrap().data(), w.data()), &x, 1e-5);
        assert_close(&ds, &num, 1e-6);
    }

    #[test]
    fn gelu_examples_and_derivative() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(20.0) - 20.0).abs() < 1e-9);
        assert!(gelu_scalar(-20.0).abs() < 1e-9);
        assert!((gelu_scalar(2.0) - 1.9545977).abs() < 1e-6);
        let x = random(&[16], 11).reshape(&[4, 4]).unwrap();
        let mut xs = x.clone();
        xs.scale(3.0);
        let analytic = gelu_backward(&xs, &Tensor::full(&[4, 4], 1.0));
        let numeric = finite_diff_grad(|t| gelu(t).sum(), &xs, 1e-5);
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn layer_norm_examples() {
        let gain = Tensor::full(&[3], 1.0);
        let bias = Tensor::zeros(&[3]);
        let (y, _) = layer_norm(&Tensor::full(&[1, 3], 4.2), &gain, &bias).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));

        let gain = Tensor::full(&[2], 1.0);
        let bias = Tensor::zeros(&[2]);
        let (y, _) = layer_norm(&Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap(), &gain, &bias)
            .unwrap();
        let expected = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[0] - expected).abs() < 1e-12);
        assert!((y.data()[1] + expected).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let x = random(&[3, 5], 21);
        let gain = random(&[5], 22);
        let bias = random(&[5], 23);
        let w = random(&[3, 5], 24);
        let loss = |x: &Tensor, g: &Tensor, b: &Tensor| dot(layer_norm(x, g, b).unwrap().0.data(), w.data());
        let (_, cache) = layer_norm(&x, &gain, &bias).unwrap();
        let mut dg = gain.zeros_like();
        let mut db = bias.zeros_like();
        let dx = layer_norm_backward(&cache, &gain, &w, &mut dg, &mut db);
        assert_close(&dx, &finite_diff_grad(|t| loss(t, &gain, &bias), &x, 1e-5), 1e-6);
        assert_close(&dg, &finite_diff_grad(|t| loss(&x, t, &bias), &gain, 1e-5), 1e-6);
        assert_close(&db, &finite_diff_grad(|t| loss(&x, &gain, t), &bias, 1e-5), 1e-6);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::zeros(&[2, 4]);
        let l = cross_entropy(&uniform, &[0, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let peaked = Tensor::from_rows(&[vec![50.0, 0.0, 0.0]]).unwrap();
        assert!(cross_entropy(&peaked, &[0]).unwrap() < 1e-20);
        assert!(matches!(
            cross_entropy(&uniform, &[0, 4]),
            Err(Error::Index { index: 4, .. })
        ));
    }

    #[test]
    fn cross_entropy_backward_matches_finite_differences() {
        let logits = random(&[4, 6], 31);
        let targets = [0, 5, 2, 2];
        let g = cross_entropy_backward(&logits, &targets).unwrap();
        let n = finite_diff_grad(|t| cross_entropy(t, &targets).unwrap(), &logits, 1e-5);
        assert_close(&g, &n, 1e-6);
    }

    #[test]
    fn linear_backward_matches_matmul_backward() {
        let x = random(&[3, 4], 41);
        let w = random(&[5, 4], 42);
        let dy = random(&[3, 5], 43);
        let mut dw = w.zeros_like();
        let dx = linear_backward(&x, &w, &dy, &mut dw).unwrap();
        let num_w = finite_diff_grad(|t| dot(linear(&x, t).unwrap().data(), dy.data()), &w, 1e-5);
        let num_x = finite_diff_grad(|t| dot(linear(t, &w).unwrap().data(), dy.data()), &x, 1e-5);
        assert_close(&dw, &num_w, 1e-8);
        assert_close(&dx, &num_x, 1e-8);
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_are_distributions(values in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let s = softmax(&Tensor::vector(&values).unwrap(), 0).unwrap();
            let total: f64 = s.data().iter().sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-12);
            proptest::prop_assert!(s.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
