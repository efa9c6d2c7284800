//! Hand-derived vector-Jacobian products for the kernels in this module.
//!
//! Every function takes the forward output (or its cache) and the upstream
//! gradient and returns the gradient with respect to the forward inputs.

use super::{dot, matmul_nt, matmul_tn, LayerNormCache, Real, Tensor};
use crate::error::Result;

pub use super::attention::{mh_attention_backward, mh_attention_cached, AttentionGrads};

/// `(dA, dB)` for `C = A B`.
pub fn matmul_backward<F: Real>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    dc: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    Ok((matmul_nt(dc, b)?, matmul_tn(a, dc)?))
}

/// Backward of a row softmax given its output `y`: `y * (dy - <dy, y>)`.
pub fn softmax_rows_backward<F: Real>(y: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let mut dx = dy.clone();
    for r in 0..y.outer() {
        let s = dot(y.row(r), dy.row(r));
        let yr = y.row(r).to_vec();
        for (g, p) in dx.row_mut(r).iter_mut().zip(yr) {
            *g = F::of(p.f64() * (g.f64() - s));
        }
    }
    dx
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward<F: Real>(
    cache: &LayerNormCache<F>,
    gain: &Tensor<F>,
    dy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let d = dy.last_dim();
    let n = d as f64;
    let mut dx = dy.clone();
    let mut dgain = vec![0.0f64; d];
    let mut dbias = vec![0.0f64; d];
    for r in 0..dy.outer() {
        let xh = cache.xhat.row(r);
        let g = dy.row(r);
        let mut dxh = vec![0.0f64; d];
        for j in 0..d {
            dgain[j] += g[j].f64() * xh[j].f64();
            dbias[j] += g[j].f64();
            dxh[j] = g[j].f64() * gain.data()[j].f64();
        }
        let sum_dxh: f64 = dxh.iter().sum();
        let sum_dxh_xh: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b.f64()).sum();
        let is = cache.inv_std[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = F::of(is / n * (n * dxh[j] - sum_dxh - xh[j].f64() * sum_dxh_xh));
        }
    }
    (
        dx,
        Tensor::vector(dgain.into_iter().map(F::of).collect()),
        Tensor::vector(dbias.into_iter().map(F::of).collect()),
    )
}

/// Backward of row-wise L2 normalization `y = x / |x|`:
/// `(dy - y <y, dy>) / |x|`.
pub fn l2_normalize_rows_backward<F: Real>(y: &Tensor<F>, norms: &[f64], dy: &Tensor<F>) -> Tensor<F> {
    let mut dx = dy.clone();
    for (r, &n) in norms.iter().enumerate() {
        let s = dot(y.row(r), dy.row(r));
        let yr = y.row(r).to_vec();
        for (g, v) in dx.row_mut(r).iter_mut().zip(yr) {
            *g = F::of((g.f64() - v.f64() * s) / n);
        }
    }
    dx
}

/// Backward of ReLU given its pre-activation input.
pub fn relu_backward<F: Real>(pre: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let mut dx = dy.clone();
    for (g, &p) in dx.data_mut().iter_mut().zip(pre.data()) {
        if p <= F::zero() {
            *g = F::zero();
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    //! Each backward kernel against central finite differences of the
    //! forward kernel through a fixed random linear read-out.
    use super::*;
    use crate::tensor::{
        l2_normalize_rows, layer_norm_cached, matmul, mh_attention, relu, softmax_rows, MhaWeights,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn readout(y: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
        dot(y.data(), w.data())
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let h = 1e-6;
        let mut g = x.clone();
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>) {
        assert_eq!(a.shape(), b.shape());
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            let tol = 1e-6 + 1e-5 * x.abs().max(y.abs());
            assert!((x - y).abs() <= tol, "coordinate {i}: analytic {x} vs numeric {y}");
        }
    }

    #[test]
    fn matmul_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let w = rand_tensor(&mut rng, &[3, 2]);
        let (da, db) = matmul_backward(&a, &b, &w).unwrap();
        assert_close(&da, &numeric_grad(&a, |a| readout(&matmul(a, &b).unwrap(), &w)));
        assert_close(&db, &numeric_grad(&b, |b| readout(&matmul(&a, b).unwrap(), &w)));
    }

    #[test]
    fn softmax_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[3, 5]).scale(3.0);
        let w = rand_tensor(&mut rng, &[3, 5]);
        let dx = softmax_rows_backward(&softmax_rows(&x), &w);
        assert_close(&dx, &numeric_grad(&x, |x| readout(&softmax_rows(x), &w)));
    }

    #[test]
    fn layer_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[4, 6]);
        let gain = rand_tensor(&mut rng, &[6]);
        let bias = rand_tensor(&mut rng, &[6]);
        let w = rand_tensor(&mut rng, &[4, 6]);
        let (_, cache) = layer_norm_cached(&x, &gain, &bias).unwrap();
        let (dx, dg, db) = layer_norm_backward(&cache, &gain, &w);
        let f = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
            readout(&layer_norm_cached(x, g, b).unwrap().0, &w)
        };
        assert_close(&dx, &numeric_grad(&x, |x| f(x, &gain, &bias)));
        assert_close(&dg, &numeric_grad(&gain, |g| f(&x, g, &bias)));
        assert_close(&db, &numeric_grad(&bias, |b| f(&x, &gain, b)));
    }

    #[test]
    fn l2_normalize_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[3, 4]);
        let (y, norms) = l2_normalize_rows(&x).unwrap();
        let dx = l2_normalize_rows_backward(&y, &norms, &w);
        assert_close(&dx, &numeric_grad(&x, |x| readout(&l2_normalize_rows(x).unwrap().0, &w)));
    }

    #[test]
    fn relu_grad_away_from_kink() {
        let x = Tensor::vector(vec![-0.5f64, 0.3, 1.2, -2.0]);
        let w = Tensor::vector(vec![1.0f64, 2.0, 3.0, 4.0]);
        let dx = relu_backward(&x, &w);
        assert_close(&dx, &numeric_grad(&x, |x| readout(&relu(x), &w)));
    }

    #[test]
    fn attention_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 4;
        let q = rand_tensor(&mut rng, &[3, d]);
        let k = rand_tensor(&mut rng, &[5, d]);
        let v = rand_tensor(&mut rng, &[5, d]);
        let weights = MhaWeights {
            wq: rand_tensor(&mut rng, &[d, d]),
            wk: rand_tensor(&mut rng, &[d, d]),
            wv: rand_tensor(&mut rng, &[d, d]),
            wo: rand_tensor(&mut rng, &[d, d]),
        };
        let r = rand_tensor(&mut rng, &[3, d]);
        let (_, cache) = mh_attention_cached(&q, &k, &v, &weights, 2).unwrap();
        let g = mh_attention_backward(&cache, &weights, &r).unwrap();
        let f = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, w: &MhaWeights<f64>| {
            readout(&mh_attention(q, k, v, w, 2).unwrap(), &r)
        };
        assert_close(&g.dq_in, &numeric_grad(&q, |q| f(q, &k, &v, &weights)));
        assert_close(&g.dk_in, &numeric_grad(&k, |k| f(&q, k, &v, &weights)));
        assert_close(&g.dv_in, &numeric_grad(&v, |v| f(&q, &k, v, &weights)));
        let with = |slot: usize, t: &Tensor<f64>| {
            let mut w = weights.clone();
            *[&mut w.wq, &mut w.wk, &mut w.wv, &mut w.wo][slot] = t.clone();
            w
        };
        let wq = numeric_grad(&weights.wq, |t| f(&q, &k, &v, &with(0, t)));
        let wk = numeric_grad(&weights.wk, |t| f(&q, &k, &v, &with(1, t)));
        let wv = numeric_grad(&weights.wv, |t| f(&q, &k, &v, &with(2, t)));
        let wo = numeric_grad(&weights.wo, |t| f(&q, &k, &v, &with(3, t)));
        assert_close(&g.weights.wq, &wq);
        assert_close(&g.weights.wk, &wk);
        assert_close(&g.weights.wv, &wv);
        assert_close(&g.weights.wo, &wo);
    }
}
