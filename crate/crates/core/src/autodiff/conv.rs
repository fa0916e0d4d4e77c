//! 2-D cross-correlation over NHWC tensors with `[kh, kw, Cin, Cout]` kernels.
//!
//! Lowered to a single GEMM through an im2col buffer. The buffer is rebuilt
//! in the backward pass instead of being kept alive on the tape.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt, matmul_at_b, matmul_into, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Symmetric zero padding sized from the dilated kernel extent.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
        }
    }
}

impl Conv2dOptions {
    pub fn dilated(dilation: usize) -> Self {
        Self {
            dilation,
            ..Self::default()
        }
    }
}

/// One spatial axis: output length and leading pad.
#[derive(Debug, Clone, Copy)]
struct Axis {
    input: usize,
    output: usize,
    pad: usize,
    kernel: usize,
}

impl Axis {
    fn new(input: usize, kernel: usize, opts: Conv2dOptions) -> Result<Self> {
        let extent = (kernel - 1) * opts.dilation + 1;
        let (output, pad) = match opts.padding {
            Padding::Same => {
                let output = input.div_ceil(opts.stride);
                let total = ((output - 1) * opts.stride + extent).saturating_sub(input);
                (output, total / 2)
            }
            Padding::Valid => {
                if input < extent {
                    return Err(Error::invalid(format!(
                        "valid convolution: dilated kernel extent {extent} exceeds input {input}"
                    )));
                }
                ((input - extent) / opts.stride + 1, 0)
            }
        };
        Ok(Self {
            input,
            output,
            pad,
            kernel,
        })
    }

    /// Source coordinate for output `o` and kernel tap `k`, if inside.
    #[inline]
    fn source(&self, o: usize, k: usize, opts: &Conv2dOptions) -> Option<usize> {
        let pos = (o * opts.stride + k * opts.dilation) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < self.input).then_some(pos as usize)
    }
}

struct Geometry {
    batch: usize,
    cin: usize,
    rows: Axis,
    cols: Axis,
    opts: Conv2dOptions,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.rows.kernel * self.cols.kernel * self.cin
    }

    fn out_pixels(&self) -> usize {
        self.rows.output * self.cols.output
    }

    fn is_pointwise(&self) -> bool {
        self.rows.kernel == 1
            && self.cols.kernel == 1
            && self.opts.stride == 1
            && self.rows.pad == 0
            && self.cols.pad == 0
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let (h, w, cin) = (self.rows.input, self.cols.input, self.cin);
        let k = self.patch_len();
        let mut buf = vec![T::zero(); self.batch * self.out_pixels() * k];
        let mut dst_row = 0;
        for n in 0..self.batch {
            let img = &x[n * h * w * cin..(n + 1) * h * w * cin];
            for oi in 0..self.rows.output {
                for oj in 0..self.cols.output {
                    let dst = &mut buf[dst_row * k..(dst_row + 1) * k];
                    for ki in 0..self.rows.kernel {
                        let Some(si) = self.rows.source(oi, ki, &self.opts) else {
                            continue;
                        };
                        for kj in 0..self.cols.kernel {
                            let Some(sj) = self.cols.source(oj, kj, &self.opts) else {
                                continue;
                            };
                            let d = (ki * self.cols.kernel + kj) * cin;
                            let s = (si * w + sj) * cin;
                            dst[d..d + cin].copy_from_slice(&img[s..s + cin]);
                        }
                    }
                    dst_row += 1;
                }
            }
        }
        buf
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let (h, w, cin) = (self.rows.input, self.cols.input, self.cin);
        let k = self.patch_len();
        let mut gx = vec![T::zero(); self.batch * h * w * cin];
        let mut src_row = 0;
        for n in 0..self.batch {
            let img = &mut gx[n * h * w * cin..(n + 1) * h * w * cin];
            for oi in 0..self.rows.output {
                for oj in 0..self.cols.output {
                    let src = &cols[src_row * k..(src_row + 1) * k];
                    for ki in 0..self.rows.kernel {
                        let Some(si) = self.rows.source(oi, ki, &self.opts) else {
                            continue;
                        };
                        for kj in 0..self.cols.kernel {
                            let Some(sj) = self.cols.source(oj, kj, &self.opts) else {
                                continue;
                            };
                            let d = (si * w + sj) * cin;
                            let s = (ki * self.cols.kernel + kj) * cin;
                            img[d..d + cin]
                                .iter_mut()
                                .zip(&src[s..s + cin])
                                .for_each(|(a, &b)| *a += b);
                        }
                    }
                    src_row += 1;
                }
            }
        }
        gx
    }
}

impl<T: Scalar> Graph<T> {
    /// Dilated, strided 2-D cross-correlation plus optional bias.
    pub fn conv2d(
        &self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        opts: Conv2dOptions,
    ) -> Result<Var> {
        let tx = self.value(x);
        let tk = self.value(kernel);
        let (batch, h, w, cin) = tx.dims4()?;
        let (kh, kw, kcin, cout) = match tk.shape() {
            &[kh, kw, kcin, cout] => (kh, kw, kcin, cout),
            s => return Err(Error::shape("conv2d kernel", tx.shape(), s)),
        };
        if kcin != cin {
            return Err(Error::shape("conv2d", tx.shape(), tk.shape()));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv2d kernel spatial dims must be odd, got {kh}x{kw}"
            )));
        }
        if opts.stride == 0 || opts.dilation == 0 {
            return Err(Error::invalid("conv2d stride and dilation must be >= 1"));
        }
        let tb = match bias {
            Some(b) => {
                let tb = self.value(b);
                if tb.shape() != [cout] {
                    return Err(Error::shape("conv2d bias", tb.shape(), &[cout]));
                }
                Some(tb)
            }
            None => None,
        };
        let geo = Geometry {
            batch,
            cin,
            rows: Axis::new(h, kh, opts)?,
            cols: Axis::new(w, kw, opts)?,
            opts,
        };
        let m = batch * geo.out_pixels();
        let k = geo.patch_len();

        let mut out = vec![T::zero(); m * cout];
        if let Some(tb) = &tb {
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(tb.data());
            }
        }
        if geo.is_pointwise() {
            matmul_into(tx.data(), tk.data(), &mut out, m, k, cout, T::one());
        } else {
            let cols = geo.im2col(tx.data());
            matmul_into(&cols, tk.data(), &mut out, m, k, cout, T::one());
        }
        let value = Tensor::from_parts(vec![batch, geo.rows.output, geo.cols.output, cout], out);

        let mut parents = vec![x, kernel];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.record(
            "conv2d",
            value,
            &parents,
            Box::new(move |g| {
                let pointwise = geo.is_pointwise();
                let cols_owned;
                let cols: &[T] = if pointwise {
                    tx.data()
                } else {
                    cols_owned = geo.im2col(tx.data());
                    &cols_owned
                };
                let mut gk = vec![T::zero(); k * cout];
                matmul_at_b(cols, g, &mut gk, m, k, cout, T::zero());
                let mut gcols = vec![T::zero(); m * k];
                matmul_a_bt(g, tk.data(), &mut gcols, m, cout, k, T::zero());
                let gx = if pointwise { gcols } else { geo.col2im(&gcols) };
                let mut grads = vec![Some(gx), Some(gk)];
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
}
