//! 3D convolution and transposed convolution over `[B, C, D, H, W]`.
//!
//! Everything is expressed through one strided correlation
//! (`strided_corr`), its weight gradient and its input adjoint. A transposed
//! convolution is the adjoint of the conv with the same geometry, so its
//! forward pass is `strided_corr_adjoint` and its input gradient is
//! `strided_corr`.

use rayon::prelude::*;

use super::direct::{
    corr_forward, corr_weight_grad, embed, pack_weights, pack_weights_swapped, round_up, CorrShape, CT, XT,
};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Geometry of a strided, zero-padded cross-correlation from `input`
/// extents to `output` extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    /// Geometry of a forward convolution; output extents are derived.
    pub fn forward(
        op: &'static str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        input: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 || kernel[a] == 0 {
                return Err(TensorError::invalid(op, "kernel and stride must be positive"));
            }
            if pad[a] >= kernel[a] {
                return Err(TensorError::invalid(
                    op,
                    format!("axis {a}: padding {} must be smaller than kernel {}", pad[a], kernel[a]),
                ));
            }
            let padded = input[a] + 2 * pad[a];
            if padded < kernel[a] {
                return Err(TensorError::invalid(
                    op,
                    format!("axis {a}: padded extent {padded} smaller than kernel {}", kernel[a]),
                ));
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(ConvGeom {
            cin,
            cout,
            kernel,
            stride,
            pad,
            input,
            output,
        })
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }
}

/// Batch loop with per-item outputs concatenated in order.
fn per_item<T: Scalar>(batch: usize, item_len: usize, f: impl Fn(usize, &mut [T]) + Sync) -> Vec<T> {
    let mut out = vec![T::zero(); batch * item_len];
    out.par_chunks_mut(item_len.max(1))
        .enumerate()
        .for_each(|(b, o)| super::ftz::flushed(|| f(b, o)));
    out
}

/// Sums per-item weight/bias gradients in batch order.
fn reduce_ordered<T: Scalar>(parts: Vec<(Vec<T>, Vec<T>)>, wlen: usize, blen: usize) -> (Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); wlen];
    let mut db = vec![T::zero(); blen];
    for (iw, ib) in parts {
        dw.iter_mut().zip(&iw).for_each(|(a, &b)| *a += b);
        db.iter_mut().zip(&ib).for_each(|(a, &b)| *a += b);
    }
    (dw, db)
}

fn channel_sums<T: Scalar>(d: &[T], channels: usize) -> Vec<T> {
    let n = d.len() / channels.max(1);
    d.chunks(n.max(1)).map(|r| r.iter().copied().sum()).collect()
}

fn check_pad(g: &ConvGeom) {
    for a in 0..3 {
        assert!(
            g.pad[a] < g.kernel[a],
            "padding {} must be smaller than kernel {} on axis {a}",
            g.pad[a],
            g.kernel[a]
        );
    }
}

/// Stride-1 correlation extents along x and the padded row length that
/// serves both the forward kernel and the weight-gradient kernel.
fn padded_x(input_x: usize, pad_x: usize, kernel_x: usize) -> (usize, usize) {
    let xs = input_x + 2 * pad_x - kernel_x + 1;
    let xp = (input_x + 2 * pad_x).max(round_up(xs, XT) + kernel_x - 1);
    (xs, xp)
}

fn subsample_x<T: Scalar>(src: &[T], rows: usize, xs: usize, stride: usize, out_x: usize, dst: &mut [T]) {
    for r in 0..rows {
        for x in 0..out_x {
            dst[r * out_x + x] = src[r * xs + x * stride];
        }
    }
}

/// Strided correlation of one item: `[cin][I] -> [cout][O]`.
fn strided_corr<T: Scalar>(g: &ConvGeom, wt: &[T], x: &[T], out: &mut [T]) {
    let [iz, iy, ix] = g.input;
    let [pz, py, px] = g.pad;
    let [oz, oy, ox] = g.output;
    let (xs, xp) = padded_x(ix, px, g.kernel[2]);
    let dims = [iz + 2 * pz, iy + 2 * py, xp];
    let e = embed(x, g.cin, g.input, [1, 1, 1], g.pad, dims);
    let cs = CorrShape {
        cin: g.cin,
        cout: g.cout,
        kernel: g.kernel,
        stride: [g.stride[0], g.stride[1]],
        input: dims,
        output: [oz, oy, xs],
    };
    if g.stride[2] == 1 {
        corr_forward(&cs, &e.data, wt, out);
    } else {
        let mut tmp = vec![T::zero(); g.cout * oz * oy * xs];
        corr_forward(&cs, &e.data, wt, &mut tmp);
        subsample_x(&tmp, g.cout * oz * oy, xs, g.stride[2], ox, out);
    }
}

/// Weight gradient of [`strided_corr`] for one item, `[cout][cin][taps]`.
fn strided_corr_weight_grad<T: Scalar>(g: &ConvGeom, x: &[T], dout: &[T]) -> Vec<T> {
    let [iz, iy, ix] = g.input;
    let [pz, py, px] = g.pad;
    let [oz, oy, ox] = g.output;
    let (_, xp) = padded_x(ix, px, g.kernel[2]);
    let dims = [iz + 2 * pz, iy + 2 * py, xp];
    let e = embed(x, g.cin, g.input, [1, 1, 1], g.pad, dims);
    let stuffed = (ox - 1) * g.stride[2] + 1;
    let owp = round_up(stuffed, XT);
    let mut d = embed(dout, g.cout, g.output, [1, 1, g.stride[2]], [0, 0, 0], [oz, oy, owp]);
    d.data.resize(round_up(g.cout, CT) * oz * oy * owp, T::zero());
    let cs = CorrShape {
        cin: g.cin,
        cout: g.cout,
        kernel: g.kernel,
        stride: [g.stride[0], g.stride[1]],
        input: dims,
        output: [oz, oy, owp],
    };
    let mut dw = vec![T::zero(); g.cout * g.cin * g.taps()];
    corr_weight_grad(&cs, &e.data, &d.data, &mut dw);
    dw
}

/// Adjoint of [`strided_corr`] with respect to its input, for one item:
/// `[cout][O] -> [cin][I]`. `wt_adj` is the weight packed with
/// `pack_weights_swapped(w, cin, cout, taps, true)`.
fn strided_corr_adjoint<T: Scalar>(g: &ConvGeom, wt_adj: &[T], dout: &[T], dx: &mut [T]) {
    let [iz, iy, ix] = g.input;
    let [kz, ky, kx] = g.kernel;
    let lo = [kz - 1 - g.pad[0], ky - 1 - g.pad[1], kx - 1 - g.pad[2]];
    let dims = [iz + kz - 1, iy + ky - 1, (ix + kx - 1).max(round_up(ix, XT) + kx - 1)];
    let e = embed(dout, g.cout, g.output, g.stride, lo, dims);
    let cs = CorrShape {
        cin: g.cout,
        cout: g.cin,
        kernel: g.kernel,
        stride: [1, 1],
        input: dims,
        output: g.input,
    };
    corr_forward(&cs, &e.data, wt_adj, dx);
}

/// `out[b] = conv(x[b], w) + bias`. Weight is `[cout, cin, kd, kh, kw]`.
pub fn conv_forward<T: Scalar>(g: &ConvGeom, batch: usize, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let in_sz = g.cin * g.in_voxels();
    let n = g.out_voxels();
    let wt = pack_weights(w, g.cout, g.cin, g.taps(), false);
    per_item(batch, g.cout * n, |b, o| {
        strided_corr(g, &wt, &x[b * in_sz..(b + 1) * in_sz], o);
        if let Some(bias) = bias {
            for (c, row) in o.chunks_mut(n).enumerate() {
                row.iter_mut().for_each(|v| *v += bias[c]);
            }
        }
    })
}

/// Gradients of [`conv_forward`]: returns `(dx, dw, db)`.
///
/// Per-item weight gradients are reduced in batch order, so the result does
/// not depend on the worker count.
pub fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    w: &[T],
    dout: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let in_sz = g.cin * g.in_voxels();
    let out_sz = g.cout * g.out_voxels();
    let parts: Vec<(Vec<T>, Vec<T>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            super::ftz::flushed(|| {
                let dob = &dout[b * out_sz..(b + 1) * out_sz];
                let dw = strided_corr_weight_grad(g, &x[b * in_sz..(b + 1) * in_sz], dob);
                (dw, channel_sums(dob, g.cout))
            })
        })
        .collect();
    let (dw, db) = reduce_ordered(parts, g.cout * g.cin * g.taps(), g.cout);
    let dx = need_dx.then(|| {
        check_pad(g);
        let wt_adj = pack_weights_swapped(w, g.cin, g.cout, g.taps(), true);
        per_item(batch, in_sz, |b, o| {
            strided_corr_adjoint(g, &wt_adj, &dout[b * out_sz..(b + 1) * out_sz], o)
        })
    });
    (dx, dw, db)
}

/// Transposed convolution. `g` is the geometry of the *adjoint* forward
/// convolution, i.e. from the transposed output (`g.input`, `g.cin`
/// channels) to the transposed input (`g.output`, `g.cout` channels).
/// Weight layout is `[g.cout, g.cin, kd, kh, kw]`, the usual
/// `[in_channels, out_channels, ...]` for a transposed layer.
pub fn conv_transpose_forward<T: Scalar>(g: &ConvGeom, batch: usize, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    check_pad(g);
    let x_sz = g.cout * g.out_voxels();
    let vox = g.in_voxels();
    let wt_adj = pack_weights_swapped(w, g.cin, g.cout, g.taps(), true);
    per_item(batch, g.cin * vox, |b, o| {
        strided_corr_adjoint(g, &wt_adj, &x[b * x_sz..(b + 1) * x_sz], o);
        if let Some(bias) = bias {
            for (c, row) in o.chunks_mut(vox).enumerate() {
                row.iter_mut().for_each(|v| *v += bias[c]);
            }
        }
    })
}

/// Gradients of [`conv_transpose_forward`]: returns `(dx, dw, db)`.
pub fn conv_transpose_backward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    w: &[T],
    dout: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let x_sz = g.cout * g.out_voxels();
    let y_sz = g.cin * g.in_voxels();
    // y = adjoint(x), so dW comes from correlating dy with x the same way a
    // forward conv correlates its input with its output gradient.
    let parts: Vec<(Vec<T>, Vec<T>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            super::ftz::flushed(|| {
                let dyb = &dout[b * y_sz..(b + 1) * y_sz];
                let dw = strided_corr_weight_grad(g, dyb, &x[b * x_sz..(b + 1) * x_sz]);
                (dw, channel_sums(dyb, g.cin))
            })
        })
        .collect();
    // strided_corr_weight_grad yields [g.cout][g.cin][taps], which is the
    // transposed weight layout already.
    let (dw, db) = reduce_ordered(parts, g.cout * g.cin * g.taps(), g.cin);
    let dx = need_dx.then(|| {
        let wt = pack_weights(w, g.cout, g.cin, g.taps(), false);
        per_item(batch, x_sz, |b, o| {
            strided_corr(g, &wt, &dout[b * y_sz..(b + 1) * y_sz], o)
        })
    });
    (dx, dw, db)
}
