//! Stable scalar/row-wise primitives shared by losses and samplers.

use super::Float;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

/// log(sum(exp(x))) with max subtraction.
pub fn logsumexp<F: Float>(x: &ArrayView1<F>) -> F {
    let m = x.iter().cloned().fold(F::neg_infinity(), F::max);
    if m == F::neg_infinity() {
        return F::neg_infinity();
    }
    let s = x.iter().map(|&v| (v - m).exp()).fold(F::zero(), |a, b| a + b);
    m + s.ln()
}

/// softmax of a vector, max-subtracted.
pub fn softmax<F: Float>(x: &ArrayView1<F>) -> Array1<F> {
    let m = x.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut out = x.mapv(|v| (v - m).exp());
    let s = out.sum();
    out.mapv_inplace(|v| v / s);
    out
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows<F: Float>(x: &ArrayView2<F>) -> Array2<F> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Row-wise log-softmax: x - logsumexp(x), never log-of-softmax.
pub fn log_softmax_rows<F: Float>(x: &ArrayView2<F>) -> Array2<F> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let lse = logsumexp(&row.view());
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Backward through a row-wise softmax: given the softmax outputs `q` and
/// dL/dq, returns dL/dlogits.
pub fn softmax_backward_rows<F: Float>(q: &ArrayView2<F>, dq: &ArrayView2<F>) -> Array2<F> {
    let mut out = Array2::zeros(q.raw_dim());
    for ((q_row, dq_row), mut out_row) in q
        .rows()
        .into_iter()
        .zip(dq.rows())
        .zip(out.rows_mut())
    {
        let inner: F = q_row
            .iter()
            .zip(dq_row.iter())
            .fold(F::zero(), |a, (&qi, &di)| a + qi * di);
        for ((o, &qi), &di) in out_row.iter_mut().zip(q_row.iter()).zip(dq_row.iter()) {
            *o = qi * (di - inner);
        }
    }
    out
}

/// Numerically stable log(1 + exp(x)).
pub fn softplus<F: Float>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Mean of a slice-like 1-d view; errors on empty input are the caller's job.
pub fn mean<F: Float>(x: &ArrayView1<F>) -> F {
    x.sum() / F::from_usize(x.len()).unwrap()
}

/// Shannon entropy (nats) of a probability vector; 0 log 0 = 0.
pub fn entropy<F: Float>(p: &ArrayView1<F>) -> F {
    p.iter().fold(F::zero(), |acc, &v| {
        if v > F::zero() {
            acc - v * v.ln()
        } else {
            acc
        }
    })
}

/// Normalize rows to unit L2 norm; returns the norms alongside.
pub fn normalize_rows<F: Float>(x: &ArrayView2<F>) -> (Array2<F>, Array1<F>) {
    let norms = x.map_axis(Axis(1), |row| {
        row.iter().fold(F::zero(), |a, &v| a + v * v).sqrt()
    });
    let mut out = x.to_owned();
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        if n > F::zero() {
            row.mapv_inplace(|v| v / n);
        }
    }
    (out, norms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let x = array![5.0f64, 5.0, 5.0];
        let p = softmax(&x.view());
        for &v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_matches_direct() {
        let x = array![[1.0f64, -2.0, 0.5], [100.0, 99.0, -50.0]];
        let ls = log_softmax_rows(&x.view());
        let sm = softmax_rows(&x.view());
        for (a, b) in ls.iter().zip(sm.iter()) {
            assert!((a.exp() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_extremes_finite() {
        assert!(softplus(1000.0f64).is_finite());
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - (2.0f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn entropy_uniform_is_ln_k() {
        let p = Array1::from_elem(10, 0.1f64);
        assert!((entropy(&p.view()) - (10.0f64).ln()).abs() < 1e-12);
    }
}
