//! Forward constructors for every differentiable op.

use crate::error::{Result, TensorError};
use crate::graph::{clamp_logvar, stable_sigmoid, Graph, Op, Var};
use crate::kernels::{conv, pool, ConvGeom};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::{dims4, dims5, Tensor};

fn check_bias(op: &'static str, shape: &[usize], channels: usize) -> Result<()> {
    if shape != [channels] {
        return Err(TensorError::shape(op, format!("bias [{channels}]"), shape));
    }
    Ok(())
}

impl<T: Scalar> Graph<'_, T> {
    /// 3D cross-correlation. `x` is `[B, Cin, D, H, W]`, `w` is
    /// `[Cout, Cin, kd, kh, kw]`, `bias` is `[Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let [b, cin, d, h, wd] = dims5("conv3d", self.shape(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 5 || ws[1] != cin {
            return Err(TensorError::shape(
                "conv3d",
                format!("weight [Cout, {cin}, kd, kh, kw]"),
                &ws,
            ));
        }
        if let Some(bv) = bias {
            check_bias("conv3d", self.shape(bv), ws[0])?;
        }
        let geom = ConvGeom::forward("conv3d", cin, ws[0], [ws[2], ws[3], ws[4]], stride, pad, [d, h, wd])?;
        let [od, oh, ow] = geom.output;
        self.conv_node(x, w, bias, geom, &[b, geom.cout, od, oh, ow])
    }

    /// 2D cross-correlation on `[B, Cin, H, W]` with weight `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: [usize; 2], pad: [usize; 2]) -> Result<Var> {
        let [b, cin, h, wd] = dims4("conv2d", self.shape(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != cin {
            return Err(TensorError::shape(
                "conv2d",
                format!("weight [Cout, {cin}, kh, kw]"),
                &ws,
            ));
        }
        if let Some(bv) = bias {
            check_bias("conv2d", self.shape(bv), ws[0])?;
        }
        let geom = ConvGeom::forward(
            "conv2d",
            cin,
            ws[0],
            [1, ws[2], ws[3]],
            [1, stride[0], stride[1]],
            [0, pad[0], pad[1]],
            [1, h, wd],
        )?;
        let [_, oh, ow] = geom.output;
        self.conv_node(x, w, bias, geom, &[b, geom.cout, oh, ow])
    }

    fn conv_node(&mut self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeom, out_shape: &[usize]) -> Result<Var> {
        let data = conv::conv_forward(
            &geom,
            out_shape[0],
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let needs = self.needs(x) || self.needs(w) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::from_vec(out_shape, data)?,
            Op::Conv { x, w, b: bias, geom },
            needs,
        ))
    }

    /// Transposed 3D convolution (the adjoint of a strided conv3d).
    ///
    /// `w` is `[Cin, Cout, kd, kh, kw]`. Output extents per axis are
    /// `(in - 1) * stride - 2 * pad + kernel + output_padding`, with
    /// `output_padding < stride`.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
        output_padding: [usize; 3],
    ) -> Result<Var> {
        let [b, cin, d, h, wd] = dims5("conv_transpose3d", self.shape(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 5 || ws[0] != cin {
            return Err(TensorError::shape(
                "conv_transpose3d",
                format!("weight [{cin}, Cout, kd, kh, kw]"),
                &ws,
            ));
        }
        let cout = ws[1];
        if let Some(bv) = bias {
            check_bias("conv_transpose3d", self.shape(bv), cout)?;
        }
        let kernel = [ws[2], ws[3], ws[4]];
        let input = [d, h, wd];
        let mut out_sp = [0usize; 3];
        for a in 0..3 {
            if stride[a] == 0 {
                return Err(TensorError::invalid("conv_transpose3d", "stride must be positive"));
            }
            if output_padding[a] >= stride[a] {
                return Err(TensorError::invalid(
                    "conv_transpose3d",
                    format!(
                        "axis {a}: output_padding {} must be smaller than stride {}",
                        output_padding[a], stride[a]
                    ),
                ));
            }
            let full = (input[a] - 1) * stride[a] + kernel[a] + output_padding[a];
            if full <= 2 * pad[a] {
                return Err(TensorError::invalid(
                    "conv_transpose3d",
                    format!("axis {a}: padding {} leaves no output", pad[a]),
                ));
            }
            out_sp[a] = full - 2 * pad[a];
        }
        // adjoint conv runs from the transposed output back to its input
        let geom = ConvGeom::forward("conv_transpose3d", cout, cin, kernel, stride, pad, out_sp)?;
        if geom.output != input {
            return Err(TensorError::invalid(
                "conv_transpose3d",
                format!("inconsistent output_padding: output {out_sp:?} does not map back to input {input:?}"),
            ));
        }
        let data = conv::conv_transpose_forward(
            &geom,
            b,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|bv| self.value(bv).data()),
        );
        let needs = self.needs(x) || self.needs(w) || bias.is_some_and(|bv| self.needs(bv));
        let value = Tensor::from_vec(&[b, cout, out_sp[0], out_sp[1], out_sp[2]], data)?;
        Ok(self.push(value, Op::ConvTranspose { x, w, b: bias, geom }, needs))
    }

    /// Non-overlapping max pooling on `[B, C, D, H, W]`, window == stride.
    pub fn max_pool3d(&mut self, x: Var, window: [usize; 3]) -> Result<Var> {
        let [b, c, d, h, w] = dims5("max_pool3d", self.shape(x))?;
        let out_shape = [b, c, d / window[0].max(1), h / window[1].max(1), w / window[2].max(1)];
        self.max_pool_impl("max_pool3d", x, [b, c, d, h, w], window, &out_shape)
    }

    /// Non-overlapping max pooling on `[B, C, H, W]`.
    pub fn max_pool2d(&mut self, x: Var, window: [usize; 2]) -> Result<Var> {
        let [b, c, h, w] = dims4("max_pool2d", self.shape(x))?;
        let out_shape = [b, c, h / window[0].max(1), w / window[1].max(1)];
        self.max_pool_impl("max_pool2d", x, [b, c, 1, h, w], [1, window[0], window[1]], &out_shape)
    }

    fn max_pool_impl(
        &mut self,
        op: &'static str,
        x: Var,
        dims: [usize; 5],
        window: [usize; 3],
        out_shape: &[usize],
    ) -> Result<Var> {
        let [b, c, d, h, w] = dims;
        for (a, (&e, &k)) in [d, h, w].iter().zip(&window).enumerate() {
            if k == 0 || e % k != 0 {
                return Err(TensorError::invalid(
                    op,
                    format!("axis {a}: extent {e} is not a multiple of window {k}"),
                ));
            }
        }
        let (out, argmax) = pool::max_pool(b * c, [d, h, w], window, self.value(x).data());
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_vec(out_shape, out)?, Op::MaxPool { x, argmax }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(y, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(stable_sigmoid);
        let needs = self.needs(x);
        self.push(y, Op::Sigmoid(x), needs)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(x).numel() {
            return Err(TensorError::shape(
                "mul_const",
                format!("{} elements", self.value(x).numel()),
                &[c.len()],
            ));
        }
        let data = self.value(x).data().iter().zip(&c).map(|(&a, &b)| a * b).collect();
        let value = Tensor::from_vec(self.shape(x), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::MulConst { x, c }, needs))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x).map(|v| v * s);
        let needs = self.needs(x);
        self.push(y, Op::Scale { x, s }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape("add", format!("{:?}", self.shape(a)), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Concatenation along the channel axis (axis 1).
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::invalid("concat_channels", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return Err(TensorError::shape("concat_channels", "rank >= 2", &s0));
        }
        let mut channels = 0;
        let mut inner = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(TensorError::shape(
                    "concat_channels",
                    format!("[{}, _, {:?}]", s0[0], &s0[2..]),
                    s,
                ));
            }
            channels += s[1];
            inner.push(s[1..].iter().product::<usize>());
        }
        let batch = s0[0];
        let total: usize = inner.iter().sum();
        let mut data = Vec::with_capacity(batch * total);
        for b in 0..batch {
            for (&x, &n) in xs.iter().zip(&inner) {
                data.extend_from_slice(&self.value(x).data()[b * n..(b + 1) * n]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = channels;
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(
            Tensor::from_vec(&shape, data)?,
            Op::Concat { xs: xs.to_vec(), inner },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// `[B, C, H, W] -> [B, C, depth, H, W]`: each plane replicated along a
    /// new depth axis and multiplied by `scale`.
    pub fn repeat_depth(&mut self, x: Var, depth: usize, scale: T) -> Result<Var> {
        let [b, c, h, w] = dims4("repeat_depth", self.shape(x))?;
        if depth == 0 {
            return Err(TensorError::invalid("repeat_depth", "depth must be positive"));
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() * depth);
        for p in src.chunks(plane) {
            for _ in 0..depth {
                data.extend(p.iter().map(|&v| v * scale));
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(&[b, c, depth, h, w], data)?,
            Op::RepeatDepth { x, depth, scale },
            needs,
        ))
    }

    /// `[B, C, D, H, W] -> [B, C, H, W]` by averaging over depth.
    pub fn mean_depth(&mut self, x: Var) -> Result<Var> {
        let [b, c, d, h, w] = dims5("mean_depth", self.shape(x))?;
        let plane = h * w;
        let inv = T::one() / T::lit(d as f64);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); b * c * plane];
        for (p, dst) in data.chunks_mut(plane).enumerate() {
            for z in 0..d {
                let s = &src[(p * d + z) * plane..(p * d + z + 1) * plane];
                dst.iter_mut().zip(s).for_each(|(a, &v)| *a += v);
            }
            dst.iter_mut().for_each(|a| *a *= inv);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(&[b, c, h, w], data)?,
            Op::MeanDepth { x, depth: d },
            needs,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(T::lit(s)), Op::SumAll(x), needs)
    }

    /// Inverted dropout. Active: each element is zeroed with probability `p`
    /// and survivors are scaled by `1 / (1 - p)`. Inactive or `p == 0`:
    /// identity (the same node is returned).
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut RngState, active: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::invalid(
                "dropout",
                format!("probability must be in [0, 1), got {p}"),
            ));
        }
        if !active || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask = (0..self.value(x).numel())
            .map(|_| if rng.uniform() < p { T::zero() } else { keep })
            .collect();
        self.mul_const(x, mask)
    }

    /// DropBlock on `[B, C, D, H, W]`: per feature map, block seeds are drawn
    /// at positions where a `block_size^3` cube fits entirely, each cube is
    /// zeroed, and survivors are rescaled by `numel / kept` so the expected
    /// activation sum is preserved.
    ///
    /// The seed rate `1 - (1 - drop_rate)^(1 / block_size^3)` makes the
    /// expected dropped fraction of an interior voxel equal `drop_rate`.
    pub fn dropblock3d(
        &mut self,
        x: Var,
        block_size: usize,
        drop_rate: f64,
        rng: &mut RngState,
        active: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&drop_rate) {
            return Err(TensorError::invalid(
                "dropblock3d",
                format!("drop_rate must be in [0, 1), got {drop_rate}"),
            ));
        }
        let [b, c, d, h, w] = dims5("dropblock3d", self.shape(x))?;
        if block_size == 0 || block_size > d.min(h).min(w) {
            return Err(TensorError::invalid(
                "dropblock3d",
                format!("block_size {block_size} must be in 1..={}", d.min(h).min(w)),
            ));
        }
        if !active || drop_rate == 0.0 {
            return Ok(x);
        }
        let mask = dropblock_mask(b * c, [d, h, w], block_size, drop_rate, rng);
        let kept = mask.iter().filter(|&&m| m).count();
        let scale = if kept == 0 {
            T::zero()
        } else {
            T::lit(mask.len() as f64 / kept as f64)
        };
        let c = mask.into_iter().map(|m| if m { scale } else { T::zero() }).collect();
        self.mul_const(x, c)
    }

    /// Mean binary cross-entropy on logits,
    /// `max(z, 0) - z * y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(TensorError::shape(
                "bce_with_logits",
                format!("target {:?}", self.shape(logits)),
                target.shape(),
            ));
        }
        let z = self.value(logits).data();
        let n = z.len() as f64;
        let total: f64 = z
            .iter()
            .zip(target.data())
            .map(|(&zv, &y)| {
                let (zv, y) = (zv.as_f64(), y.as_f64());
                zv.max(0.0) - zv * y + (-zv.abs()).exp().ln_1p()
            })
            .sum();
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(T::lit(total / n)),
            Op::Bce {
                logits,
                target: target.data().to_vec(),
            },
            needs,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(TensorError::shape(
                "mse",
                format!("target {:?}", self.shape(pred)),
                target.shape(),
            ));
        }
        let p = self.value(pred).data();
        let total: f64 = p
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum();
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(T::lit(total / p.len() as f64)),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            needs,
        ))
    }

    /// `KL(q || p)` between diagonal Gaussians given as means and
    /// log-variances, summed over all non-batch elements and averaged over
    /// the leading (batch) axis.
    pub fn kl_diag_gauss(&mut self, mu_q: Var, lv_q: Var, mu_p: Var, lv_p: Var) -> Result<Var> {
        let s = self.shape(mu_q).to_vec();
        for v in [lv_q, mu_p, lv_p] {
            if self.shape(v) != s.as_slice() {
                return Err(TensorError::shape("kl_diag_gauss", format!("{s:?}"), self.shape(v)));
            }
        }
        let (mq, lq, mp, lp) = (
            self.value(mu_q).data(),
            self.value(lv_q).data(),
            self.value(mu_p).data(),
            self.value(lv_p).data(),
        );
        let total: f64 = (0..mq.len())
            .map(|j| {
                let (lqc, _) = clamp_logvar(lq[j].as_f64());
                let (lpc, _) = clamp_logvar(lp[j].as_f64());
                let diff = mq[j].as_f64() - mp[j].as_f64();
                0.5 * (lpc - lqc + (lqc.exp() + diff * diff) * (-lpc).exp() - 1.0)
            })
            .sum();
        let batch = s[0];
        let needs = [mu_q, lv_q, mu_p, lv_p].iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::scalar(T::lit(total / batch as f64)),
            Op::Kl {
                mu_q,
                lv_q,
                mu_p,
                lv_p,
                batch,
            },
            needs,
        ))
    }

    /// `mu + exp(logvar / 2) * eps` with `eps ~ N(0, 1)` drawn from `rng`.
    pub fn reparam_sample(&mut self, mu: Var, logvar: Var, rng: &mut RngState) -> Result<Var> {
        let n = self.value(mu).numel();
        let mut eps = vec![T::zero(); n];
        rng.fill_normal(&mut eps);
        self.reparam_with_noise(mu, logvar, eps)
    }

    /// [`Graph::reparam_sample`] with caller-supplied standard-normal noise.
    pub fn reparam_with_noise(&mut self, mu: Var, logvar: Var, eps: Vec<T>) -> Result<Var> {
        if self.shape(mu) != self.shape(logvar) || eps.len() != self.value(mu).numel() {
            return Err(TensorError::shape(
                "reparam_sample",
                format!("{:?}", self.shape(mu)),
                self.shape(logvar),
            ));
        }
        let data = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(logvar).data())
            .zip(&eps)
            .map(|((&m, &lv), &e)| {
                let (c, _) = clamp_logvar(lv.as_f64());
                m + T::lit((0.5 * c).exp()) * e
            })
            .collect();
        let value = Tensor::from_vec(self.shape(mu), data)?;
        let needs = self.needs(mu) || self.needs(logvar);
        Ok(self.push(value, Op::Reparam { mu, lv: logvar, eps }, needs))
    }
}

/// Keep-mask (true = kept) for DropBlock over `planes` feature maps.
pub(crate) fn dropblock_mask(
    planes: usize,
    dims: [usize; 3],
    block: usize,
    drop_rate: f64,
    rng: &mut RngState,
) -> Vec<bool> {
    let [d, h, w] = dims;
    let gamma = 1.0 - (1.0 - drop_rate).powf(1.0 / (block * block * block) as f64);
    let plane = d * h * w;
    let mut keep = vec![true; planes * plane];
    for p in 0..planes {
        let m = &mut keep[p * plane..(p + 1) * plane];
        for z in 0..=d - block {
            for y in 0..=h - block {
                for x in 0..=w - block {
                    if rng.uniform() < gamma {
                        for bz in z..z + block {
                            for by in y..y + block {
                                let row = (bz * h + by) * w;
                                m[row + x..row + x + block].fill(false);
                            }
                        }
                    }
                }
            }
        }
    }
    keep
}
