//! Differentiable primitives recorded on a [`Graph`].
//!
//! Image tensors are `[batch, height, width, channels]`; the channel axis is
//! always the last one, so "per channel" below means "per last-axis index".

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt, matmul_at_b, matmul_into, Scalar, Tensor};

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNormConfig {
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            momentum: 0.99,
        }
    }
}

/// Output shape of a same-rank broadcast with singleton expansion only.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For each element of `out` (row-major), the flat offset of the source
/// element it reads after singleton expansion of `src`.
fn broadcast_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0usize; n];
    let mut s = 1;
    for d in (0..n).rev() {
        strides[d] = if src[d] == 1 { 0 } else { s };
        s *= src[d];
    }
    let total: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn reduce_to<T>(grad: &[T], offsets: &[usize], len: usize) -> Vec<T>
where
    T: Scalar,
{
    let mut out = vec![T::zero(); len];
    for (&g, &o) in grad.iter().zip(offsets) {
        out[o] += g;
    }
    out
}

fn leaky(slope: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&slope) {
        return Err(Error::invalid(format!(
            "leaky relu slope must lie in [0, 1), got {slope}"
        )));
    }
    Ok(slope)
}

impl<T: Scalar> Graph<T> {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let out: Vec<T> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
            let value = Tensor::from_parts(ta.shape().to_vec(), out);
            return Ok(self.record(
                "add",
                value,
                &[a, b],
                Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
            ));
        }
        let shape = broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| Error::shape("add", ta.shape(), tb.shape()))?;
        let oa = broadcast_offsets(ta.shape(), &shape);
        let ob = broadcast_offsets(tb.shape(), &shape);
        let out = oa
            .iter()
            .zip(&ob)
            .map(|(&i, &j)| ta.data()[i] + tb.data()[j])
            .collect();
        let (la, lb) = (ta.len(), tb.len());
        Ok(self.record(
            "add",
            Tensor::from_parts(shape, out),
            &[a, b],
            Box::new(move |g| vec![Some(reduce_to(g, &oa, la)), Some(reduce_to(g, &ob, lb))]),
        ))
    }

    /// Elementwise product with singleton-axis broadcasting.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
            let value = Tensor::from_parts(ta.shape().to_vec(), out);
            return Ok(self.record(
                "mul",
                value,
                &[a, b],
                Box::new(move |g| {
                    let ga = g.iter().zip(tb.data()).map(|(&g, &y)| g * y).collect();
                    let gb = g.iter().zip(ta.data()).map(|(&g, &x)| g * x).collect();
                    vec![Some(ga), Some(gb)]
                }),
            ));
        }
        let shape = broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| Error::shape("mul", ta.shape(), tb.shape()))?;
        let oa = broadcast_offsets(ta.shape(), &shape);
        let ob = broadcast_offsets(tb.shape(), &shape);
        let out = oa
            .iter()
            .zip(&ob)
            .map(|(&i, &j)| ta.data()[i] * tb.data()[j])
            .collect();
        Ok(self.record(
            "mul",
            Tensor::from_parts(shape, out),
            &[a, b],
            Box::new(move |g| {
                let mut ga = vec![T::zero(); ta.len()];
                let mut gb = vec![T::zero(); tb.len()];
                for ((&gi, &i), &j) in g.iter().zip(&oa).zip(&ob) {
                    ga[i] += gi * tb.data()[j];
                    gb[j] += gi * ta.data()[i];
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn scale(&self, x: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let value = self.value(x).map(|v| v * f);
        self.record(
            "scale",
            value,
            &[x],
            Box::new(move |g| vec![Some(g.iter().map(|&v| v * f).collect())]),
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.len();
        self.record(
            "sum",
            Tensor::scalar(t.sum()),
            &[x],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.record("reshape", value, &[x], Box::new(|g| vec![Some(g.to_vec())])))
    }

    /// Broadcasts singleton axes of `x` up to `shape`.
    pub fn expand(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        match broadcast_shape(t.shape(), shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("expand", t.shape(), shape)),
        }
        let offsets = broadcast_offsets(t.shape(), shape);
        let out = offsets.iter().map(|&o| t.data()[o]).collect();
        let len = t.len();
        Ok(self.record(
            "expand",
            Tensor::from_parts(shape.to_vec(), out),
            &[x],
            Box::new(move |g| vec![Some(reduce_to(g, &offsets, len))]),
        ))
    }

    /// `x` where `x >= 0`, `slope·x` elsewhere.
    pub fn leaky_relu(&self, x: Var, slope: f64) -> Result<Var> {
        let s = T::from_f64(leaky(slope)?);
        let t = self.value(x);
        let value = t.map(|v| if v >= T::zero() { v } else { s * v });
        Ok(self.record(
            "leaky_relu",
            value,
            &[x],
            Box::new(move |g| {
                let gx = g
                    .iter()
                    .zip(t.data())
                    .map(|(&g, &v)| if v >= T::zero() { g } else { s * g })
                    .collect();
                vec![Some(gx)]
            }),
        ))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        let yc = y.clone();
        self.record(
            "sigmoid",
            y,
            &[x],
            Box::new(move |g| {
                let gx = g
                    .iter()
                    .zip(yc.data())
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    /// Softmax over the last (channel) axis.
    pub fn softmax(&self, x: Var) -> Var {
        let t = self.value(x);
        let c = *t.shape().last().expect("tensor has at least one axis");
        let mut out = vec![T::zero(); t.len()];
        for (row, dst) in t.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut z = T::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - m).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d = *d / z);
        }
        let y = Tensor::from_parts(t.shape().to_vec(), out);
        let yc = y.clone();
        self.record(
            "softmax",
            y,
            &[x],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), dst) in g
                    .chunks_exact(c)
                    .zip(yc.data().chunks_exact(c))
                    .zip(gx.chunks_exact_mut(c))
                {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yi * (gi - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Affine map `x·w + b` for `x: [B, Cin]`, `w: [Cin, Cout]`.
    pub fn dense(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (batch, cin, cout) = match (tx.shape(), tw.shape()) {
            (&[batch, cin], &[win, cout]) if cin == win => (batch, cin, cout),
            _ => return Err(Error::shape("dense", tx.shape(), tw.shape())),
        };
        let tb = match b {
            Some(b) => {
                let tb = self.value(b);
                if tb.shape() != [cout] {
                    return Err(Error::shape("dense bias", tb.shape(), &[cout]));
                }
                Some(tb)
            }
            None => None,
        };
        let mut out = vec![T::zero(); batch * cout];
        if let Some(tb) = &tb {
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(tb.data());
            }
        }
        matmul_into(tx.data(), tw.data(), &mut out, batch, cin, cout, T::one());
        let value = Tensor::from_parts(vec![batch, cout], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        Ok(self.record(
            "dense",
            value,
            &parents,
            Box::new(move |g| {
                let mut gx = vec![T::zero(); batch * cin];
                matmul_a_bt(g, tw.data(), &mut gx, batch, cout, cin, T::zero());
                let mut gw = vec![T::zero(); cin * cout];
                matmul_at_b(tx.data(), g, &mut gw, batch, cin, cout, T::zero());
                let mut grads = vec![Some(gx), Some(gw)];
                if has_bias {
                    let mut gb = vec![T::zero(); cout];
                    for row in g.chunks_exact(cout) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    grads.push(Some(gb));
                }
                grads
            }),
        ))
    }

    /// Per-channel batch normalization.
    ///
    /// In training mode the batch statistics normalize the input and the
    /// updated running statistics are returned; in evaluation mode `stats`
    /// is used as-is and `None` is returned.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats<T>,
        training: bool,
        cfg: BatchNormConfig,
    ) -> Result<(Var, Option<RunningStats<T>>)> {
        if cfg.epsilon <= 0.0 || cfg.epsilon.is_nan() {
            return Err(Error::invalid(format!(
                "batch norm epsilon must be positive, got {}",
                cfg.epsilon
            )));
        }
        let tx = self.value(x);
        let c = *tx.shape().last().expect("tensor has at least one axis");
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [c] || tb.shape() != [c] || stats.channels() != c {
            return Err(Error::shape("batch_norm", tx.shape(), tg.shape()));
        }
        let m = tx.len() / c;
        let eps = T::from_f64(cfg.epsilon);

        let (mean, var) = if training {
            let mut mean = vec![T::zero(); c];
            for row in tx.data().chunks_exact(c) {
                mean.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
            }
            let inv_m = T::one() / T::from_f64(m as f64);
            mean.iter_mut().for_each(|v| *v *= inv_m);
            let mut var = vec![T::zero(); c];
            for row in tx.data().chunks_exact(c) {
                for ((a, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                    *a += (v - mu) * (v - mu);
                }
            }
            var.iter_mut().for_each(|v| *v *= inv_m);
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); tx.len()];
        let mut out = vec![T::zero(); tx.len()];
        for ((src, xh), dst) in tx
            .data()
            .chunks_exact(c)
            .zip(xhat.chunks_exact_mut(c))
            .zip(out.chunks_exact_mut(c))
        {
            for ch in 0..c {
                xh[ch] = (src[ch] - mean[ch]) * inv_std[ch];
                dst[ch] = tg.data()[ch] * xh[ch] + tb.data()[ch];
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);

        let updated = training.then(|| {
            let mom = T::from_f64(cfg.momentum);
            let keep = T::one() - mom;
            RunningStats {
                mean: stats
                    .mean
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &b)| mom * r + keep * b)
                    .collect(),
                var: stats
                    .var
                    .iter()
                    .zip(&var)
                    .map(|(&r, &b)| mom * r + keep * b)
                    .collect(),
            }
        });

        let var_out = self.record(
            "batch_norm",
            value,
            &[x, gamma, beta],
            Box::new(move |g| {
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        sum_g[ch] += gr[ch];
                        sum_gx[ch] += gr[ch] * xr[ch];
                    }
                }
                let mut gx = vec![T::zero(); g.len()];
                let mf = T::from_f64(m as f64);
                for ((gr, xr), dst) in g
                    .chunks_exact(c)
                    .zip(xhat.chunks_exact(c))
                    .zip(gx.chunks_exact_mut(c))
                {
                    for ch in 0..c {
                        let k = tg.data()[ch] * inv_std[ch];
                        dst[ch] = if training {
                            k * (gr[ch] - sum_g[ch] / mf - xr[ch] * sum_gx[ch] / mf)
                        } else {
                            k * gr[ch]
                        };
                    }
                }
                vec![Some(gx), Some(sum_gx), Some(sum_g)]
            }),
        );
        Ok((var_out, updated))
    }

    /// 2×2, stride-2 max pooling.
    pub fn max_pool2(&self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (b, h, w, c) = t.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(format!(
                "max_pool needs even spatial dims, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = t.data();
        let mut out = Vec::with_capacity(b * ho * wo * c);
        let mut arg = Vec::with_capacity(b * ho * wo * c);
        for n in 0..b {
            for i in 0..ho {
                for j in 0..wo {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        let mut bv = T::neg_infinity();
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = ((n * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                            if best == usize::MAX || src[idx] > bv {
                                best = idx;
                                bv = src[idx];
                            }
                        }
                        out.push(bv);
                        arg.push(best);
                    }
                }
            }
        }
        let len = t.len();
        Ok(self.record(
            "max_pool",
            Tensor::from_parts(vec![b, ho, wo, c], out),
            &[x],
            Box::new(move |g| vec![Some(reduce_to(g, &arg, len))]),
        ))
    }

    /// Spatial mean per channel: `[B, H, W, C] -> [B, C]`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (b, h, w, c) = t.dims4()?;
        let hw = h * w;
        let inv = T::one() / T::from_f64(hw as f64);
        let mut out = vec![T::zero(); b * c];
        for n in 0..b {
            let dst = &mut out[n * c..(n + 1) * c];
            for row in t.data()[n * hw * c..(n + 1) * hw * c].chunks_exact(c) {
                dst.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(self.record(
            "global_avg_pool",
            Tensor::from_parts(vec![b, c], out),
            &[x],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); b * hw * c];
                for n in 0..b {
                    let gn = &g[n * c..(n + 1) * c];
                    for row in gx[n * hw * c..(n + 1) * hw * c].chunks_exact_mut(c) {
                        row.iter_mut().zip(gn).for_each(|(d, &v)| *d = v * inv);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Maximum across channels, keeping a singleton channel axis.
    pub fn channel_max(&self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (b, h, w, c) = t.dims4()?;
        let mut out = Vec::with_capacity(b * h * w);
        let mut arg = Vec::with_capacity(b * h * w);
        for (p, row) in t.data().chunks_exact(c).enumerate() {
            let (k, &v) = row
                .iter()
                .enumerate()
                .fold((0, &row[0]), |best, cur| if *cur.1 > *best.1 { cur } else { best });
            out.push(v);
            arg.push(p * c + k);
        }
        let len = t.len();
        Ok(self.record(
            "channel_max",
            Tensor::from_parts(vec![b, h, w, 1], out),
            &[x],
            Box::new(move |g| vec![Some(reduce_to(g, &arg, len))]),
        ))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be positive"));
        }
        let t = self.value(x);
        let (b, h, w, c) = t.dims4()?;
        let (ho, wo) = (h * factor, w * factor);
        let mut offsets = Vec::with_capacity(b * ho * wo * c);
        for n in 0..b {
            for i in 0..ho {
                for j in 0..wo {
                    let base = ((n * h + i / factor) * w + j / factor) * c;
                    offsets.extend(base..base + c);
                }
            }
        }
        let out = offsets.iter().map(|&o| t.data()[o]).collect();
        let len = t.len();
        Ok(self.record(
            "upsample",
            Tensor::from_parts(vec![b, ho, wo, c], out),
            &[x],
            Box::new(move |g| vec![Some(reduce_to(g, &offsets, len))]),
        ))
    }

    pub fn upsample2x(&self, x: Var) -> Result<Var> {
        self.upsample(x, 2)
    }

    /// Concatenation along the last (channel) axis.
    pub fn concat(&self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat needs at least one input"))?;
        let lead = self.shape(*first);
        let lead = &lead[..lead.len() - 1];
        let tensors: Vec<Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let mut widths = Vec::with_capacity(xs.len());
        for t in &tensors {
            let s = t.shape();
            if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat", tensors[0].shape(), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (t, &wd) in tensors.iter().zip(&widths) {
                out.extend_from_slice(&t.data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.record(
            "concat",
            Tensor::from_parts(shape, out),
            xs,
            Box::new(move |g| {
                let mut grads: Vec<Vec<T>> =
                    widths.iter().map(|&wd| Vec::with_capacity(rows * wd)).collect();
                for row in g.chunks_exact(total) {
                    let mut start = 0;
                    for (dst, &wd) in grads.iter_mut().zip(&widths) {
                        dst.extend_from_slice(&row[start..start + wd]);
                        start += wd;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Channels `start..start + len` of `x`.
    pub fn slice_channels(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let c = *t.shape().last().expect("tensor has at least one axis");
        if len == 0 || start + len > c {
            return Err(Error::invalid(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let out: Vec<T> = t
            .data()
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let n = t.len();
        Ok(self.record(
            "slice_channels",
            Tensor::from_parts(shape, out),
            &[x],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); n];
                for (dst, src) in gx.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                    dst[start..start + len].copy_from_slice(src);
                }
                vec![Some(gx)]
            }),
        ))
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
