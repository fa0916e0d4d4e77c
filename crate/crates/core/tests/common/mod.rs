//! Brute-force reference implementations shared by the integration tests.
//! None of these call into the crate's numerics.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

pub fn labels(n: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(0..classes)).collect()
}

/// Direct-loop dilated/strided cross-correlation with symmetric "same"
/// padding. `x` is `[b, h, w, cin]`, `k` is `[kh, kw, cin, cout]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_same(
    x: &[f64],
    (b, h, w, cin): (usize, usize, usize, usize),
    k: &[f64],
    (kh, kw, cout): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    dilation: usize,
) -> (Vec<f64>, (usize, usize)) {
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let pad_h = (((oh - 1) * stride + (kh - 1) * dilation + 1).saturating_sub(h)) / 2;
    let pad_w = (((ow - 1) * stride + (kw - 1) * dilation + 1).saturating_sub(w)) / 2;
    let mut out = vec![0.0; b * oh * ow * cout];
    for n in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                for co in 0..cout {
                    let mut acc = bias.map_or(0.0, |bb| bb[co]);
                    for di in 0..kh {
                        for dj in 0..kw {
                            let si = (i * stride + di * dilation) as isize - pad_h as isize;
                            let sj = (j * stride + dj * dilation) as isize - pad_w as isize;
                            if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                continue;
                            }
                            let (si, sj) = (si as usize, sj as usize);
                            for ci in 0..cin {
                                acc += x[((n * h + si) * w + sj) * cin + ci]
                                    * k[((di * kw + dj) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out[((n * oh + i) * ow + j) * cout + co] = acc;
                }
            }
        }
    }
    (out, (oh, ow))
}

/// `x [n, a] · w [a, m] + b`.
pub fn dense(x: &[f64], n: usize, a: usize, w: &[f64], m: usize, b: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        for c in 0..m {
            let mut acc = b.map_or(0.0, |bb| bb[c]);
            for t in 0..a {
                acc += x[r * a + t] * w[t * m + c];
            }
            out[r * m + c] = acc;
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn leaky(v: f64, slope: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        slope * v
    }
}

/// Squeeze-and-excitation on one `[h, w, c]` map with weights
/// `w1 [c, hidden]`, `w2 [hidden, c]` and no biases.
pub fn se_block(x: &[f64], hw: usize, c: usize, w1: &[f64], w2: &[f64], hidden: usize, slope: f64) -> Vec<f64> {
    let mut z = vec![0.0; c];
    for p in 0..hw {
        for ch in 0..c {
            z[ch] += x[p * c + ch];
        }
    }
    for v in &mut z {
        *v /= hw as f64;
    }
    let mut hid = vec![0.0; hidden];
    for (u, hv) in hid.iter_mut().enumerate() {
        let s: f64 = (0..c).map(|ch| z[ch] * w1[ch * hidden + u]).sum();
        *hv = leaky(s, slope);
    }
    let gate: Vec<f64> = (0..c)
        .map(|ch| sigmoid((0..hidden).map(|u| hid[u] * w2[u * c + ch]).sum()))
        .collect();
    x.iter().enumerate().map(|(i, v)| v * gate[i % c]).collect()
}

/// Per-class confusion tallies and metrics by scanning pixels once per class.
#[derive(Debug, Clone, Copy)]
pub struct OracleClass {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub dice: f64,
    pub iou: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub accuracy: f64,
}

/// 0/0 convention: 1 when the class (or its complement) is absent from both
/// sides, else 0.
fn safe(num: u64, den: u64, both_absent: bool) -> f64 {
    if den == 0 {
        if both_absent {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn class_metrics(pred: &[usize], truth: &[usize], class: usize) -> OracleClass {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == class, t == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    OracleClass {
        tp,
        fp,
        fn_,
        tn,
        dice: safe(2 * tp, 2 * tp + fp + fn_, true),
        iou: safe(tp, tp + fp + fn_, true),
        // No positives in truth: sensitivity is 1 only if none predicted.
        sensitivity: safe(tp, tp + fn_, fp == 0),
        // No negatives in truth: specificity is 1 only if none missed.
        specificity: safe(tn, tn + fp, fn_ == 0),
        precision: safe(tp, tp + fp, fn_ == 0),
        accuracy: safe(tp + tn, tp + tn + fp + fn_, true),
    }
}

pub fn pixel_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / pred.len() as f64
}

const EPS: f64 = 1e-7;

fn clamp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// Mean over pixels of `-Σ_c t ln p`.
pub fn cce(pred: &[f64], truth: &[f64], classes: usize) -> f64 {
    let pixels = pred.len() / classes;
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| if t != 0.0 { -t * clamp(p).ln() } else { 0.0 })
        .sum();
    total / pixels as f64
}

/// `-(1/N) Σ [w₁ y ln p + (1-y) ln(1-p)]` with class weights `[w₀, w₁]`
/// where only the positive term is weighted.
pub fn wbce(pred: &[f64], truth: &[f64], w: [f64; 2]) -> f64 {
    let n = pred.len() as f64;
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| {
            let wp = if t > 0.5 { w[1] } else { w[0] };
            wp * t * clamp(p).ln() + (1.0 - t) * clamp(1.0 - p).ln()
        })
        .sum();
    -total / n
}

pub fn dice_loss(pred: &[f64], truth: &[f64], smooth: f64) -> f64 {
    let inter: f64 = pred.iter().zip(truth).map(|(p, t)| p * t).sum();
    let den = pred.iter().sum::<f64>() + truth.iter().sum::<f64>() + smooth;
    if den == 0.0 {
        0.0
    } else {
        1.0 - (2.0 * inter + smooth) / den
    }
}

/// Scalar Adam, bias-corrected, for a gradient sequence.
pub fn adam_trace(x0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    let mut out = Vec::with_capacity(grads.len());
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        x -= lr * mh / (vh.sqrt() + eps);
        out.push(x);
    }
    out
}
