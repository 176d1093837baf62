//! Multinomial logistic regression: L2-regularized softmax cross-entropy.
//!
//! Parameters are packed as one flat vector: the `K x d` weight matrix in
//! row-major order followed by the `K` biases. The L2 penalty
//! `(l2 / 2) * ||W||^2` covers weights only.

use crate::math::softmax_in_place;

pub fn param_len(k: usize, d: usize) -> usize {
    k * d + k
}

pub(crate) fn logits_into(params: &[f64], k: usize, d: usize, x: &[f64], out: &mut [f64]) {
    let (w, b) = params.split_at(k * d);
    for c in 0..k {
        let row = &w[c * d..(c + 1) * d];
        out[c] = b[c] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

/// Mean cross-entropy plus the L2 penalty.
pub fn cross_entropy(params: &[f64], k: usize, d: usize, xs: &[&[f64]], ys: &[usize], l2: f64) -> f64 {
    let mut p = vec![0.0; k];
    let mut loss = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        logits_into(params, k, d, x, &mut p);
        softmax_in_place(&mut p);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
    }
    let reg: f64 = params[..k * d].iter().map(|w| w * w).sum();
    loss / xs.len() as f64 + 0.5 * l2 * reg
}

/// Analytic gradient of [`cross_entropy`].
pub fn cross_entropy_gradient(
    params: &[f64],
    k: usize,
    d: usize,
    xs: &[&[f64]],
    ys: &[usize],
    l2: f64,
) -> Vec<f64> {
    let mut g = vec![0.0; params.len()];
    let idx: Vec<usize> = (0..xs.len()).collect();
    batch_gradient(params, k, d, xs, ys, l2, &idx, &mut g);
    g
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_gradient(
    params: &[f64],
    k: usize,
    d: usize,
    xs: &[&[f64]],
    ys: &[usize],
    l2: f64,
    batch: &[usize],
    g: &mut [f64],
) {
    let mut p = vec![0.0; k];
    let (gw, gb) = g.split_at_mut(k * d);
    for &i in batch {
        let x = xs[i];
        logits_into(params, k, d, x, &mut p);
        softmax_in_place(&mut p);
        p[ys[i]] -= 1.0;
        for c in 0..k {
            let e = p[c];
            if e == 0.0 {
                continue;
            }
            gb[c] += e;
            for (gv, xv) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                *gv += e * xv;
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for (gv, wv) in gw.iter_mut().zip(&params[..k * d]) {
        *gv = *gv * scale + l2 * wv;
    }
    for gv in gb.iter_mut() {
        *gv *= scale;
    }
}
