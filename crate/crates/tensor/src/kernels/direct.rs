//! Register-blocked direct correlation kernels.
//!
//! Both kernels work on a zero-padded input buffer laid out
//! `[channels][Zp][Yp][Xp]` and assume unit stride along x; strides along z
//! and y are native. Every convolution, transposed convolution and gradient
//! in [`super::conv`] is reduced to these two primitives by zero-stuffing and
//! padding with [`embed`].

use std::any::TypeId;

use crate::scalar::Scalar;

/// Output channels per register tile.
pub const CT: usize = 8;
/// Output x-positions per register tile.
pub const XT: usize = 16;

#[inline]
pub fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Padded buffer `[channels][dims[0]][dims[1]][dims[2]]`.
pub struct Embedded<T> {
    pub data: Vec<T>,
    pub dims: [usize; 3],
}

/// Copies `src` (`[channels][D][H][W]`) into a zero buffer, placing source
/// index `i` at `lo + i * stuff` per axis. `dims` is the full buffer extent
/// and must cover every placed element.
pub fn embed<T: Scalar>(
    src: &[T],
    channels: usize,
    src_dims: [usize; 3],
    stuff: [usize; 3],
    lo: [usize; 3],
    dims: [usize; 3],
) -> Embedded<T> {
    let [d, h, w] = src_dims;
    let [zp, yp, xp] = dims;
    for a in 0..3 {
        debug_assert!(
            src_dims[a] == 0 || lo[a] + (src_dims[a] - 1) * stuff[a] < dims[a],
            "embed: axis {a} overflow"
        );
    }
    let mut data = vec![T::zero(); channels * zp * yp * xp];
    for c in 0..channels {
        for z in 0..d {
            for y in 0..h {
                let s = &src[((c * d + z) * h + y) * w..((c * d + z) * h + y + 1) * w];
                let row = ((c * zp + lo[0] + z * stuff[0]) * yp + lo[1] + y * stuff[1]) * xp;
                if stuff[2] == 1 {
                    data[row + lo[2]..row + lo[2] + w].copy_from_slice(s);
                } else {
                    for (x, &v) in s.iter().enumerate() {
                        data[row + lo[2] + x * stuff[2]] = v;
                    }
                }
            }
        }
    }
    Embedded { data, dims }
}

/// Reorders `[a][b][taps]` weights into the tile layout `[b][taps][a_pad]`
/// used by [`corr_forward`], where `a` becomes the output channel. With
/// `flip` the tap order is reversed.
pub fn pack_weights<T: Scalar>(w: &[T], a: usize, b: usize, taps: usize, flip: bool) -> Vec<T> {
    let ap = round_up(a, CT);
    let mut out = vec![T::zero(); b * taps * ap];
    for ia in 0..a {
        for ib in 0..b {
            for t in 0..taps {
                let src_t = if flip { taps - 1 - t } else { t };
                out[(ib * taps + t) * ap + ia] = w[(ia * b + ib) * taps + src_t];
            }
        }
    }
    out
}

/// Same as [`pack_weights`] but for `[b][a][taps]` source layout.
pub fn pack_weights_swapped<T: Scalar>(w: &[T], a: usize, b: usize, taps: usize, flip: bool) -> Vec<T> {
    let ap = round_up(a, CT);
    let mut out = vec![T::zero(); b * taps * ap];
    for ib in 0..b {
        for ia in 0..a {
            for t in 0..taps {
                let src_t = if flip { taps - 1 - t } else { t };
                out[(ib * taps + t) * ap + ia] = w[(ib * a + ia) * taps + src_t];
            }
        }
    }
    out
}

/// Shape parameters shared by both kernels.
#[derive(Clone, Copy, Debug)]
pub struct CorrShape {
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    /// Strides along z and y.
    pub stride: [usize; 2],
    /// Padded input extents.
    pub input: [usize; 3],
    /// Output extents (x at unit stride).
    pub output: [usize; 3],
}

impl CorrShape {
    /// Minimum padded x extent the kernels may read.
    pub fn min_input_x(&self) -> usize {
        round_up(self.output[2], XT) + self.kernel[2] - 1
    }
}

fn corr_forward_body<T: Scalar>(s: &CorrShape, p: &[T], wt: &[T], out: &mut [T]) {
    let [zp, yp, xp] = s.input;
    let [od, oh, ow] = s.output;
    let [kd, kh, kw] = s.kernel;
    let [sz, sy] = s.stride;
    let cop = round_up(s.cout, CT);
    let taps = kd * kh * kw;
    for co0 in (0..s.cout).step_by(CT) {
        let ct = CT.min(s.cout - co0);
        for oz in 0..od {
            for oy in 0..oh {
                for x0 in (0..ow).step_by(XT) {
                    let mut acc = [[T::zero(); XT]; CT];
                    for ci in 0..s.cin {
                        for dz in 0..kd {
                            for dy in 0..kh {
                                let row = ((ci * zp + oz * sz + dz) * yp + oy * sy + dy) * xp + x0;
                                let tap0 = (ci * taps + (dz * kh + dy) * kw) * cop + co0;
                                for dx in 0..kw {
                                    let v: &[T; XT] = p[row + dx..row + dx + XT].try_into().unwrap();
                                    let w: &[T; CT] = wt[tap0 + dx * cop..tap0 + dx * cop + CT].try_into().unwrap();
                                    for c in 0..CT {
                                        let wc = w[c];
                                        for j in 0..XT {
                                            acc[c][j] += wc * v[j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let n = XT.min(ow - x0);
                    for (c, a) in acc.iter().enumerate().take(ct) {
                        let o = (((co0 + c) * od + oz) * oh + oy) * ow + x0;
                        out[o..o + n].copy_from_slice(&a[..n]);
                    }
                }
            }
        }
    }
}

fn corr_weight_grad_body<T: Scalar>(s: &CorrShape, p: &[T], dout: &[T], dw: &mut [T]) {
    let [zp, yp, xp] = s.input;
    let [od, oh, owp] = s.output;
    let [kd, kh, kw] = s.kernel;
    let [sz, sy] = s.stride;
    let taps = kd * kh * kw;
    for co0 in (0..s.cout).step_by(CT) {
        let ct = CT.min(s.cout - co0);
        for oz in 0..od {
            for ci in 0..s.cin {
                for dz in 0..kd {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let mut acc = [[T::zero(); XT]; CT];
                            for oy in 0..oh {
                                let row = ((ci * zp + oz * sz + dz) * yp + oy * sy + dy) * xp + dx;
                                for x0 in (0..owp).step_by(XT) {
                                    let v: &[T; XT] = p[row + x0..row + x0 + XT].try_into().unwrap();
                                    for (c, a) in acc.iter_mut().enumerate().take(ct) {
                                        let o = (((co0 + c) * od + oz) * oh + oy) * owp + x0;
                                        let d: &[T; XT] = dout[o..o + XT].try_into().unwrap();
                                        for j in 0..XT {
                                            a[j] += d[j] * v[j];
                                        }
                                    }
                                }
                            }
                            let t = (dz * kh + dy) * kw + dx;
                            for (c, a) in acc.iter().enumerate().take(ct) {
                                dw[((co0 + c) * s.cin + ci) * taps + t] += a.iter().copied().sum();
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Views `&[T]` as `&[f32]` when `T` is `f32`.
fn as_f32<T: Scalar>(s: &[T]) -> Option<&[f32]> {
    (TypeId::of::<T>() == TypeId::of::<f32>())
        // SAFETY: T is f32, so layout and validity are identical.
        .then(|| unsafe { std::slice::from_raw_parts(s.as_ptr().cast::<f32>(), s.len()) })
}

fn as_f32_mut<T: Scalar>(s: &mut [T]) -> Option<&mut [f32]> {
    (TypeId::of::<T>() == TypeId::of::<f32>())
        // SAFETY: as above.
        .then(|| unsafe { std::slice::from_raw_parts_mut(s.as_mut_ptr().cast::<f32>(), s.len()) })
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::{round_up, CorrShape, CT, XT};
    use std::arch::x86_64::*;

    /// Forward tile loop with `LANES`-wide vectors; `G` channels per pass.
    macro_rules! forward_impl {
        ($name:ident, $feat:literal, $vec:ty, $lanes:expr, $g:expr,
         $zero:ident, $load:ident, $set1:ident, $fma:ident, $store:ident) => {
            #[target_feature(enable = $feat)]
            pub unsafe fn $name(s: &CorrShape, p: &[f32], wt: &[f32], out: &mut [f32]) {
                const V: usize = XT / $lanes;
                let [zp, yp, xp] = s.input;
                let [od, oh, ow] = s.output;
                let [kd, kh, kw] = s.kernel;
                let [sz, sy] = s.stride;
                let cop = round_up(s.cout, CT);
                let taps = kd * kh * kw;
                let pp = p.as_ptr();
                let wp = wt.as_ptr();
                let mut tile = [0f32; XT];
                for co0 in (0..s.cout).step_by($g) {
                    let ct = $g.min(s.cout - co0);
                    for oz in 0..od {
                        for oy in 0..oh {
                            for x0 in (0..ow).step_by(XT) {
                                let mut acc: [[$vec; V]; $g] = [[$zero(); V]; $g];
                                for ci in 0..s.cin {
                                    for dz in 0..kd {
                                        for dy in 0..kh {
                                            let row = ((ci * zp + oz * sz + dz) * yp + oy * sy + dy) * xp + x0;
                                            let tap0 = (ci * taps + (dz * kh + dy) * kw) * cop + co0;
                                            for dx in 0..kw {
                                                let src = pp.add(row + dx);
                                                let mut v = [$zero(); V];
                                                for (j, vj) in v.iter_mut().enumerate() {
                                                    *vj = $load(src.add(j * $lanes));
                                                }
                                                let w = wp.add(tap0 + dx * cop);
                                                for (c, a) in acc.iter_mut().enumerate() {
                                                    let wc = $set1(*w.add(c));
                                                    for j in 0..V {
                                                        a[j] = $fma(wc, v[j], a[j]);
                                                    }
                                                }
                                            }
                                        }
                                    }
                                }
                                let n = XT.min(ow - x0);
                                for (c, a) in acc.iter().enumerate().take(ct) {
                                    for (j, &aj) in a.iter().enumerate() {
                                        $store(tile.as_mut_ptr().add(j * $lanes), aj);
                                    }
                                    let o = (((co0 + c) * od + oz) * oh + oy) * ow + x0;
                                    out[o..o + n].copy_from_slice(&tile[..n]);
                                }
                            }
                        }
                    }
                }
            }
        };
    }

    /// Weight-gradient loop covering `KW` consecutive x taps from `dx0`, so
    /// every output-gradient load feeds `KW` FMAs.
    macro_rules! weight_grad_impl {
        ($name:ident, $feat:literal, $vec:ty, $lanes:expr, $g:expr,
         $zero:ident, $load:ident, $fma:ident, $store:ident) => {
            #[target_feature(enable = $feat)]
            pub unsafe fn $name<const KW: usize>(s: &CorrShape, p: &[f32], dout: &[f32], dw: &mut [f32], dx0: usize) {
                let [zp, yp, xp] = s.input;
                let [od, oh, owp] = s.output;
                let [kd, kh, kw] = s.kernel;
                let [sz, sy] = s.stride;
                let taps = kd * kh * kw;
                let pp = p.as_ptr();
                let dp = dout.as_ptr();
                let plane = od * oh * owp;
                let mut lanes = [0f32; $lanes];
                for co0 in (0..s.cout).step_by($g) {
                    let ct = $g.min(s.cout - co0);
                    for oz in 0..od {
                        for ci in 0..s.cin {
                            for dz in 0..kd {
                                for dy in 0..kh {
                                    let mut acc: [[$vec; KW]; $g] = [[$zero(); KW]; $g];
                                    for oy in 0..oh {
                                        let row = ((ci * zp + oz * sz + dz) * yp + oy * sy + dy) * xp + dx0;
                                        let drow = dp.add(((co0 * od + oz) * oh + oy) * owp);
                                        for x0 in (0..owp).step_by($lanes) {
                                            let mut v = [$zero(); KW];
                                            for (k, vk) in v.iter_mut().enumerate() {
                                                *vk = $load(pp.add(row + x0 + k));
                                            }
                                            for (c, a) in acc.iter_mut().enumerate() {
                                                let d = $load(drow.add(c * plane + x0));
                                                for k in 0..KW {
                                                    a[k] = $fma(d, v[k], a[k]);
                                                }
                                            }
                                        }
                                    }
                                    let t0 = (dz * kh + dy) * kw + dx0;
                                    for (c, a) in acc.iter().enumerate().take(ct) {
                                        for (k, &ak) in a.iter().enumerate() {
                                            $store(lanes.as_mut_ptr(), ak);
                                            dw[((co0 + c) * s.cin + ci) * taps + t0 + k] += lanes.iter().sum::<f32>();
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };
    }

    forward_impl!(
        forward_avx512,
        "avx512f",
        __m512,
        16,
        8,
        _mm512_setzero_ps,
        _mm512_loadu_ps,
        _mm512_set1_ps,
        _mm512_fmadd_ps,
        _mm512_storeu_ps
    );
    forward_impl!(
        forward_avx2,
        "avx2,fma",
        __m256,
        8,
        4,
        _mm256_setzero_ps,
        _mm256_loadu_ps,
        _mm256_set1_ps,
        _mm256_fmadd_ps,
        _mm256_storeu_ps
    );
    weight_grad_impl!(
        weight_grad_avx512,
        "avx512f",
        __m512,
        16,
        8,
        _mm512_setzero_ps,
        _mm512_loadu_ps,
        _mm512_fmadd_ps,
        _mm512_storeu_ps
    );
    weight_grad_impl!(
        weight_grad_avx2,
        "avx2,fma",
        __m256,
        8,
        4,
        _mm256_setzero_ps,
        _mm256_loadu_ps,
        _mm256_fmadd_ps,
        _mm256_storeu_ps
    );
}

/// `out[co][z][y][x] = sum_{ci, tap} wt[ci][tap][co] * p[ci][z*sz+dz][y*sy+dy][x+dx]`.
///
/// `wt` is packed by [`pack_weights`]; `p` must have x extent at least
/// [`CorrShape::min_input_x`]. `out` is `[cout][od][oh][ow]` and is
/// overwritten.
pub fn corr_forward<T: Scalar>(s: &CorrShape, p: &[T], wt: &[T], out: &mut [T]) {
    assert!(s.input[2] >= s.min_input_x(), "corr_forward: input row too short");
    assert_eq!(p.len(), s.cin * s.input.iter().product::<usize>());
    assert_eq!(
        wt.len(),
        s.cin * s.kernel.iter().product::<usize>() * round_up(s.cout, CT)
    );
    assert_eq!(out.len(), s.cout * s.output.iter().product::<usize>());
    #[cfg(target_arch = "x86_64")]
    if let (Some(p32), Some(w32)) = (as_f32(p), as_f32(wt)) {
        let o32 = as_f32_mut(out).expect("same scalar type");
        // SAFETY: the required CPU features were detected at runtime and the
        // buffer extents were checked above.
        if is_x86_feature_detected!("avx512f") {
            return unsafe { x86::forward_avx512(s, p32, w32, o32) };
        }
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            return unsafe { x86::forward_avx2(s, p32, w32, o32) };
        }
    }
    corr_forward_body(s, p, wt, out)
}

/// `dw[co][ci][tap] += sum_{z,y,x} dout[co][z][y][x] * p[ci][z*sz+dz][y*sy+dy][x+dx]`.
///
/// `dout` is `[round_up(cout, CT)][od][oh][owp]` with `owp` (= `output[2]`)
/// a multiple of [`XT`] and zeros past the valid region.
pub fn corr_weight_grad<T: Scalar>(s: &CorrShape, p: &[T], dout: &[T], dw: &mut [T]) {
    assert_eq!(s.output[2] % XT, 0, "corr_weight_grad: output x must be tile-aligned");
    assert!(
        s.input[2] >= s.output[2] + s.kernel[2] - 1,
        "corr_weight_grad: input row too short"
    );
    assert_eq!(p.len(), s.cin * s.input.iter().product::<usize>());
    assert_eq!(dout.len(), round_up(s.cout, CT) * s.output.iter().product::<usize>());
    assert_eq!(dw.len(), s.cout * s.cin * s.kernel.iter().product::<usize>());
    #[cfg(target_arch = "x86_64")]
    if let (Some(p32), Some(d32)) = (as_f32(p), as_f32(dout)) {
        let w32 = as_f32_mut(dw).expect("same scalar type");
        // SAFETY: as in `corr_forward`.
        macro_rules! run {
            ($f:ident) => {{
                match s.kernel[2] {
                    3 => unsafe { x86::$f::<3>(s, p32, d32, w32, 0) },
                    2 => unsafe { x86::$f::<2>(s, p32, d32, w32, 0) },
                    kw => (0..kw).for_each(|dx| unsafe { x86::$f::<1>(s, p32, d32, w32, dx) }),
                }
                return;
            }};
        }
        if is_x86_feature_detected!("avx512f") {
            run!(weight_grad_avx512);
        }
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            run!(weight_grad_avx2);
        }
    }
    corr_weight_grad_body(s, p, dout, dw)
}
