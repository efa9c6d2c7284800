use super::grad::softmax_rows_backward;
use super::{matmul, matmul_nt, matmul_tn, softmax_rows, Real, Tensor};
use crate::error::{Error, Result};

/// Projection weights of one multi-head attention layer, all `[d x d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaWeights<F: Real = f64> {
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
}

impl<F: Real> MhaWeights<F> {
    pub fn identity(d: usize) -> Self {
        Self {
            wq: Tensor::identity(d),
            wk: Tensor::identity(d),
            wv: Tensor::identity(d),
            wo: Tensor::identity(d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            wq: Tensor::zeros(vec![d, d]),
            wk: Tensor::zeros(vec![d, d]),
            wv: Tensor::zeros(vec![d, d]),
            wo: Tensor::zeros(vec![d, d]),
        }
    }

    pub fn width(&self) -> usize {
        self.wq.rows()
    }
}

/// Intermediates of one attention forward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache<F: Real = f64> {
    q_in: Tensor<F>,
    k_in: Tensor<F>,
    v_in: Tensor<F>,
    q: Tensor<F>,
    k: Tensor<F>,
    v: Tensor<F>,
    /// Attention probabilities per head, each `[Nq x Nk]`.
    probs: Vec<Tensor<F>>,
    concat: Tensor<F>,
    heads: usize,
}

/// Gradients of an attention layer with respect to its inputs and weights.
#[derive(Debug, Clone)]
pub struct AttentionGrads<F: Real = f64> {
    pub dq_in: Tensor<F>,
    pub dk_in: Tensor<F>,
    pub dv_in: Tensor<F>,
    pub weights: MhaWeights<F>,
}

fn head_cols<F: Real>(x: &Tensor<F>, h: usize, dh: usize) -> Tensor<F> {
    let n = x.rows();
    Tensor::from_fn(vec![n, dh], |i| x.row(i / dh)[h * dh + i % dh])
}

fn put_head_cols<F: Real>(dst: &mut Tensor<F>, src: &Tensor<F>, h: usize, dh: usize) {
    for r in 0..src.rows() {
        dst.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(src.row(r));
    }
}

/// Scaled dot-product multi-head attention followed by the output
/// projection. Each head attends with scale `1/sqrt(d/heads)`.
pub fn mh_attention<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    weights: &MhaWeights<F>,
    heads: usize,
) -> Result<Tensor<F>> {
    mh_attention_cached(q, k, v, weights, heads).map(|(out, _)| out)
}

pub fn mh_attention_cached<F: Real>(
    q_in: &Tensor<F>,
    k_in: &Tensor<F>,
    v_in: &Tensor<F>,
    weights: &MhaWeights<F>,
    heads: usize,
) -> Result<(Tensor<F>, AttentionCache<F>)> {
    let d = weights.width();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "attention width {d} is not divisible into {heads} heads"
        )));
    }
    if k_in.rows() != v_in.rows() {
        return Err(Error::shape("mh_attention", k_in.shape(), v_in.shape()));
    }
    let q = matmul(q_in, &weights.wq)?;
    let k = matmul(k_in, &weights.wk)?;
    let v = matmul(v_in, &weights.wv)?;
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut concat = Tensor::zeros(vec![q.rows(), d]);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = (head_cols(&q, h, dh), head_cols(&k, h, dh), head_cols(&v, h, dh));
        let scores = matmul_nt(&qh, &kh)?.scale(scale);
        let p = softmax_rows(&scores);
        put_head_cols(&mut concat, &matmul(&p, &vh)?, h, dh);
        probs.push(p);
    }
    let out = matmul(&concat, &weights.wo)?;
    let cache = AttentionCache {
        q_in: q_in.clone(),
        k_in: k_in.clone(),
        v_in: v_in.clone(),
        q,
        k,
        v,
        probs,
        concat,
        heads,
    };
    Ok((out, cache))
}

pub fn mh_attention_backward<F: Real>(
    cache: &AttentionCache<F>,
    weights: &MhaWeights<F>,
    d_out: &Tensor<F>,
) -> Result<AttentionGrads<F>> {
    let d = weights.width();
    let dh = d / cache.heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());

    let dwo = matmul_tn(&cache.concat, d_out)?;
    let d_concat = matmul_nt(d_out, &weights.wo)?;

    let mut dq = Tensor::zeros(cache.q.shape().to_vec());
    let mut dk = Tensor::zeros(cache.k.shape().to_vec());
    let mut dv = Tensor::zeros(cache.v.shape().to_vec());
    for (h, p) in cache.probs.iter().enumerate() {
        let qh = head_cols(&cache.q, h, dh);
        let kh = head_cols(&cache.k, h, dh);
        let vh = head_cols(&cache.v, h, dh);
        let d_oh = head_cols(&d_concat, h, dh);
        let dp = matmul_nt(&d_oh, &vh)?;
        put_head_cols(&mut dv, &matmul_tn(p, &d_oh)?, h, dh);
        let ds = softmax_rows_backward(p, &dp).scale(scale);
        put_head_cols(&mut dq, &matmul(&ds, &kh)?, h, dh);
        put_head_cols(&mut dk, &matmul_tn(&ds, &qh)?, h, dh);
    }

    Ok(AttentionGrads {
        dq_in: matmul_nt(&dq, &weights.wq)?,
        dk_in: matmul_nt(&dk, &weights.wk)?,
        dv_in: matmul_nt(&dv, &weights.wv)?,
        weights: MhaWeights {
            wq: matmul_tn(&cache.q_in, &dq)?,
            wk: matmul_tn(&cache.k_in, &dk)?,
            wv: matmul_tn(&cache.v_in, &dv)?,
            wo: dwo,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_rows;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_key_returns_value_row() {
        let q = Tensor::from_rows(&[&[0.3f64, -0.2, 0.9]]);
        let v = Tensor::from_rows(&[&[1.5f64, 2.5, -3.0]]);
        let out = mh_attention(&q, &q, &v, &MhaWeights::identity(3), 1).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_values_give_zero_output() {
        let q = Tensor::<f64>::from_fn(vec![3, 4], |i| i as f64 * 0.1);
        let k = Tensor::<f64>::from_fn(vec![5, 4], |i| (i as f64).sin());
        let v = Tensor::<f64>::zeros(vec![5, 4]);
        let out = mh_attention(&q, &k, &v, &MhaWeights::identity(4), 2).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let x = Tensor::<f64>::zeros(vec![2, 5]);
        let err = mh_attention(&x, &x, &x, &MhaWeights::identity(5), 2).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn one_head_identity_matches_direct_formula() {
        let q = Tensor::<f64>::from_fn(vec![3, 4], |i| ((i * 7) as f64).sin());
        let k = Tensor::<f64>::from_fn(vec![5, 4], |i| ((i * 3) as f64).cos());
        let v = Tensor::<f64>::from_fn(vec![5, 4], |i| i as f64 * 0.05 - 0.4);
        let out = mh_attention(&q, &k, &v, &MhaWeights::identity(4), 1).unwrap();
        let scores = matmul_nt(&q, &k).unwrap().scale(0.5);
        let direct = matmul(&softmax_rows(&scores), &v).unwrap();
        for (a, b) in out.data().iter().zip(direct.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    /// Two queries, two keys, one head of width 2: every step written out
    /// with scalars.
    #[test]
    fn two_by_two_matches_scripted_computation() {
        let q_in = Tensor::from_rows(&[&[1.0f64, 0.0], &[0.5, -1.0]]);
        let kv = Tensor::from_rows(&[&[0.0f64, 1.0], &[2.0, 1.0]]);
        let w = MhaWeights {
            wq: Tensor::from_rows(&[&[1.0, 0.5], &[0.0, 1.0]]),
            wk: Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]),
            wv: Tensor::from_rows(&[&[1.0, 1.0], &[0.0, 1.0]]),
            wo: Tensor::from_rows(&[&[0.5, 0.0], &[0.0, 1.0]]),
        };
        let out = mh_attention(&q_in, &kv, &kv, &w, 1).unwrap();

        // q = q_in wq: [1, 0.5], [0.5, -0.75]; k = kv wk: [0, 2], [2, 2];
        // v = kv wv: [0, 1], [2, 3].
        let s = 1.0 / 2f64.sqrt();
        let expected = |qa: f64, qb: f64| {
            let s0 = (qa * 0.0 + qb * 2.0) * s;
            let s1 = (qa * 2.0 + qb * 2.0) * s;
            let (e0, e1) = (s0.exp(), s1.exp());
            let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            let (o0, o1) = (p1 * 2.0, p0 * 1.0 + p1 * 3.0);
            [o0 * 0.5, o1]
        };
        let r0 = expected(1.0, 0.5);
        let r1 = expected(0.5, -0.75);
        let want = [r0[0], r0[1], r1[0], r1[1]];
        for (a, b) in out.data().iter().zip(want) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }
}
