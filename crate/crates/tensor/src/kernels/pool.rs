use crate::scalar::Scalar;

/// Non-overlapping max pooling over `[N, D, H, W]` planes (N = batch *
/// channels) with window equal to stride. Returns the pooled values and, per
/// output element, the flat input index of the first maximum.
pub fn max_pool<T: Scalar>(planes: usize, dims: [usize; 3], window: [usize; 3], x: &[T]) -> (Vec<T>, Vec<usize>) {
    let [d, h, w] = dims;
    let [wd, wh, ww] = window;
    let (od, oh, ow) = (d / wd, h / wh, w / ww);
    let in_plane = d * h * w;
    let out_plane = od * oh * ow;
    let mut out = Vec::with_capacity(planes * out_plane);
    let mut arg = Vec::with_capacity(planes * out_plane);
    for p in 0..planes {
        let base = p * in_plane;
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_ix = usize::MAX;
                    for dz in 0..wd {
                        for dy in 0..wh {
                            let row = base + ((oz * wd + dz) * h + oy * wh + dy) * w + ox * ww;
                            for dx in 0..ww {
                                let v = x[row + dx];
                                // strict comparison keeps the first maximum in scan order
                                if v > best || best_ix == usize::MAX {
                                    best = v;
                                    best_ix = row + dx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_ix);
                }
            }
        }
    }
    (out, arg)
}
