//! One-hidden-layer rectifier network with a softmax head.
//!
//! Flat layout: `W1 (H x d)`, `b1 (H)`, `W2 (K x H)`, `b2 (K)`. L2 applies
//! to both weight matrices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math::softmax_in_place;

pub fn param_len(k: usize, d: usize, h: usize) -> usize {
    h * d + h + k * h + k
}

struct Layout {
    w1: std::ops::Range<usize>,
    b1: std::ops::Range<usize>,
    w2: std::ops::Range<usize>,
    b2: std::ops::Range<usize>,
}

fn layout(k: usize, d: usize, h: usize) -> Layout {
    let w1 = 0..h * d;
    let b1 = w1.end..w1.end + h;
    let w2 = b1.end..b1.end + k * h;
    let b2 = w2.end..w2.end + k;
    Layout { w1, b1, w2, b2 }
}

/// Glorot-uniform weights, zero biases.
pub(crate) fn init(k: usize, d: usize, h: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6c_705f_696e_6974);
    let l = layout(k, d, h);
    let mut params = vec![0.0; param_len(k, d, h)];
    let a1 = (6.0 / (d + h) as f64).sqrt();
    for v in &mut params[l.w1] {
        *v = rng.random_range(-a1..a1);
    }
    let a2 = (6.0 / (h + k) as f64).sqrt();
    for v in &mut params[l.w2] {
        *v = rng.random_range(-a2..a2);
    }
    params
}

/// Writes hidden activations into `hidden` and output logits into `out`.
pub(crate) fn forward(params: &[f64], k: usize, d: usize, h: usize, x: &[f64], hidden: &mut [f64], out: &mut [f64]) {
    let l = layout(k, d, h);
    let w1 = &params[l.w1];
    let b1 = &params[l.b1];
    for j in 0..h {
        let z = b1[j] + w1[j * d..(j + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
        hidden[j] = z.max(0.0);
    }
    let w2 = &params[l.w2];
    let b2 = &params[l.b2];
    for c in 0..k {
        out[c] = b2[c] + w2[c * h..(c + 1) * h].iter().zip(hidden.iter()).map(|(a, v)| a * v).sum::<f64>();
    }
}

pub fn cross_entropy(params: &[f64], k: usize, d: usize, h: usize, xs: &[&[f64]], ys: &[usize], l2: f64) -> f64 {
    let l = layout(k, d, h);
    let mut hidden = vec![0.0; h];
    let mut p = vec![0.0; k];
    let mut loss = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        forward(params, k, d, h, x, &mut hidden, &mut p);
        softmax_in_place(&mut p);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
    }
    let reg: f64 = params[l.w1].iter().chain(&params[l.w2]).map(|w| w * w).sum();
    loss / xs.len() as f64 + 0.5 * l2 * reg
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_gradient(
    params: &[f64],
    k: usize,
    d: usize,
    h: usize,
    xs: &[&[f64]],
    ys: &[usize],
    l2: f64,
    batch: &[usize],
    g: &mut [f64],
) {
    let l = layout(k, d, h);
    let mut hidden = vec![0.0; h];
    let mut p = vec![0.0; k];
    let mut dh = vec![0.0; h];
    let w2 = &params[l.w2.clone()];
    for &i in batch {
        let x = xs[i];
        forward(params, k, d, h, x, &mut hidden, &mut p);
        softmax_in_place(&mut p);
        p[ys[i]] -= 1.0;
        dh.iter_mut().for_each(|v| *v = 0.0);
        {
            let gw2 = &mut g[l.w2.clone()];
            for (c, &e) in p.iter().enumerate() {
                let row = c * h..(c + 1) * h;
                for ((gv, hv), (wv, dv)) in gw2[row.clone()].iter_mut().zip(&hidden).zip(w2[row].iter().zip(dh.iter_mut())) {
                    *gv += e * hv;
                    *dv += e * wv;
                }
            }
        }
        for (gv, e) in g[l.b2.clone()].iter_mut().zip(&p) {
            *gv += e;
        }
        for j in 0..h {
            if hidden[j] <= 0.0 {
                continue;
            }
            let dz = dh[j];
            g[l.b1.start + j] += dz;
            let start = l.w1.start + j * d;
            for (gv, xv) in g[start..start + d].iter_mut().zip(x) {
                *gv += dz * xv;
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for r in [l.w1, l.w2] {
        for idx in r {
            g[idx] = g[idx] * scale + l2 * params[idx];
        }
    }
    for r in [l.b1, l.b2] {
        for idx in r {
            g[idx] *= scale;
        }
    }
}
