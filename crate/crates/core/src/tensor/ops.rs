use super::{dot, Real, Tensor};
use crate::error::{Error, Result};

/// Variance epsilon used by [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn require_matrix<F: Real>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `[M x K] x [K x N] -> [M x N]`.
pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    require_matrix("matmul", a, b)?;
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0.0f64;
            for (p, x) in arow.iter().enumerate() {
                acc += x.f64() * bd[p * n + j].f64();
            }
            out.push(F::of(acc));
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a * b^T` for `a: [M x K]`, `b: [N x K]`.
pub fn matmul_nt<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    require_matrix("matmul_nt", a, b)?;
    if a.cols() != b.cols() {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let (m, n) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            out.push(F::of(dot(a.row(i), b.row(j))));
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a^T * b` for `a: [K x M]`, `b: [K x N]`.
pub fn matmul_tn<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    require_matrix("matmul_tn", a, b)?;
    if a.rows() != b.rows() {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut acc = vec![0.0f64; m * n];
    for p in 0..k {
        let (arow, brow) = (a.row(p), b.row(p));
        for (i, x) in arow.iter().enumerate() {
            let x = x.f64();
            let out = &mut acc[i * n..(i + 1) * n];
            for (o, y) in out.iter_mut().zip(brow) {
                *o += x * y.f64();
            }
        }
    }
    Tensor::new(vec![m, n], acc.into_iter().map(F::of).collect())
}

pub fn transpose<F: Real>(a: &Tensor<F>) -> Tensor<F> {
    assert_eq!(a.rank(), 2, "transpose needs a matrix");
    let (m, n) = (a.rows(), a.cols());
    Tensor::from_fn(vec![n, m], |idx| a.data()[(idx % m) * n + idx / m])
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax<F: Real>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    if axis >= x.rank() {
        return Err(Error::InvalidTensor(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let len = x.shape()[axis];
    if len == 0 {
        return Err(Error::Empty("softmax"));
    }
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let src = x.data();
    let mut out = vec![F::zero(); src.len()];
    let mut buf = vec![0.0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let at = |j: usize| base + j * inner;
            let max = (0..len)
                .map(|j| src[at(j)].f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = (src[at(j)].f64() - max).exp();
                total += *b;
            }
            for (j, b) in buf.iter().enumerate() {
                out[at(j)] = F::of(b / total);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Softmax over the last axis.
pub fn softmax_rows<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    softmax(x, x.rank() - 1).expect("last axis is valid and nonempty")
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| F::of(sigmoid_scalar(v.f64())))
}

/// Cosine similarity of two equal-length vectors. Zero-norm input is an error.
pub fn cosine_sim<F: Real>(a: &[F], b: &[F]) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_sim", &[a.len()], &[b.len()]));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine_sim"));
    }
    // Product of norms is symmetric, so swapping the arguments is bit-identical.
    Ok(F::of(dot(a, b) / (na * nb)))
}

/// Per-row statistics kept for the layer-norm backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<F: Real = f64> {
    pub xhat: Tensor<F>,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm<F: Real>(x: &Tensor<F>, gain: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    layer_norm_cached(x, gain, bias).map(|(y, _)| y)
}

/// Layer norm over the last axis, also returning the normalized input and
/// inverse standard deviations.
pub fn layer_norm_cached<F: Real>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<(Tensor<F>, LayerNormCache<F>)> {
    let d = x.last_dim();
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let mut y = x.clone();
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.outer());
    for r in 0..x.outer() {
        let row = x.row(r);
        let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (h, v) in xh.iter_mut().zip(row) {
            *h = F::of((v.f64() - mean) * is);
        }
        let xh = xhat.row(r).to_vec();
        for (j, o) in y.row_mut(r).iter_mut().enumerate() {
            *o = F::of(gain.data()[j].f64() * xh[j].f64() + bias.data()[j].f64());
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// L2-normalizes every row, returning the row norms alongside.
pub fn l2_normalize_rows<F: Real>(x: &Tensor<F>) -> Result<(Tensor<F>, Vec<f64>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.outer());
    for r in 0..x.outer() {
        let n = dot(x.row(r), x.row(r)).sqrt();
        if n == 0.0 {
            return Err(Error::ZeroNorm("l2_normalize_rows"));
        }
        norms.push(n);
        for v in out.row_mut(r) {
            *v = F::of(v.f64() / n);
        }
    }
    Ok((out, norms))
}

pub fn relu<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| if v > F::zero() { v } else { F::zero() })
}

/// Adds `bias` to every row.
pub fn add_row_bias<F: Real>(x: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    if bias.len() != x.last_dim() {
        return Err(Error::shape("add_row_bias", x.shape(), bias.shape()));
    }
    let mut out = x.clone();
    for r in 0..x.outer() {
        for (o, b) in out.row_mut(r).iter_mut().zip(bias.data()) {
            *o = *o + *b;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: &[&[f32]]) -> Tensor<f32> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_examples() {
        let id = Tensor::<f32>::identity(2);
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&id, &a).unwrap(), a);
        let z = m(&[&[0.0], &[0.0]]);
        assert_eq!(matmul(&id, &z).unwrap(), z);
        let b = m(&[&[5.0], &[6.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_matmul() {
        let a = Tensor::<f64>::from_fn(vec![3, 4], |i| (i as f64).sin());
        let b = Tensor::<f64>::from_fn(vec![5, 4], |i| (i as f64 * 0.7).cos());
        let direct = matmul(&a, &transpose(&b)).unwrap();
        let nt = matmul_nt(&a, &b).unwrap();
        for (x, y) in direct.data().iter().zip(nt.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        let c = Tensor::<f64>::from_fn(vec![3, 2], |i| i as f64 - 2.5);
        let tn = matmul_tn(&a, &c).unwrap();
        let direct = matmul(&transpose(&a), &c).unwrap();
        for (x, y) in direct.data().iter().zip(tn.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0.0f32, 0.0, 0.0]), 0).unwrap();
        for &v in s.data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-7);
        }
        let s = softmax(&Tensor::vector(vec![1000.0f32, 0.0]), 0).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
        let s = softmax(&Tensor::vector(vec![1.0f32, 2.0]), 0).unwrap();
        assert_abs_diff_eq!(s.data()[0], 0.26894, epsilon = 1e-5);
        assert_abs_diff_eq!(s.data()[1], 0.73106, epsilon = 1e-5);
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = m(&[&[1.0, 5.0], &[2.0, 5.0]]);
        let s = softmax(&x, 0).unwrap();
        assert_abs_diff_eq!(s.data()[0], 0.26894, epsilon = 1e-5);
        assert_abs_diff_eq!(s.data()[2], 0.73106, epsilon = 1e-5);
        assert_abs_diff_eq!(s.data()[1], 0.5, epsilon = 1e-7);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn sigmoid_examples() {
        let s = sigmoid(&Tensor::vector(vec![0.0f32, 100.0, 1.0, -100.0]));
        assert_eq!(s.data()[0], 0.5);
        assert!((s.data()[1] as f64 - 1.0).abs() < 1e-12);
        assert_abs_diff_eq!(s.data()[2], 0.73106, epsilon = 1e-5);
        assert!(s.data()[3] >= 0.0 && s.data()[3] < 1e-40);
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(
            cosine_sim(&[1.0f32, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(),
            1.0,
            epsilon = 1e-7
        );
        assert_eq!(cosine_sim(&[1.0f32, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cosine_sim(&[1.0f32, 1.0], &[1.0, 0.0]).unwrap(),
            0.70711,
            epsilon = 1e-5
        );
        assert!(matches!(
            cosine_sim(&[0.0f32, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::vector(vec![1.0f32; 3]);
        let zeros = Tensor::vector(vec![0.0f32; 3]);
        let y = layer_norm(&Tensor::vector(vec![4.0f32; 3]), &ones, &zeros).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let b = Tensor::vector(vec![0.25f32; 3]);
        let y = layer_norm(&Tensor::vector(vec![1.0f32, -7.0, 3.0]), &zeros, &b).unwrap();
        assert_eq!(y.data(), &[0.25, 0.25, 0.25]);

        let y = layer_norm(&Tensor::vector(vec![1.0f32, 2.0, 3.0]), &ones, &zeros).unwrap();
        assert_abs_diff_eq!(y.data()[0], -1.22474, epsilon = 1e-5);
        assert_abs_diff_eq!(y.data()[1], 0.0, epsilon = 1e-7);
        assert_abs_diff_eq!(y.data()[2], 1.22474, epsilon = 1e-5);
    }
}
