//! Tape of tensor operations and the reverse sweep over it.

use crate::error::{Result, TensorError};
use crate::kernels::{conv, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Log-variances are clamped to `[-LOGVAR_CLAMP, LOGVAR_CLAMP]` inside the
/// Gaussian ops so that `exp` stays finite in single precision.
pub const LOGVAR_CLAMP: f64 = 40.0;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T> {
    Leaf,
    Param,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    MulConst {
        x: Var,
        c: Vec<T>,
    },
    Scale {
        x: Var,
        s: T,
    },
    Add(Var, Var),
    Concat {
        xs: Vec<Var>,
        inner: Vec<usize>,
    },
    Reshape(Var),
    RepeatDepth {
        x: Var,
        depth: usize,
        scale: T,
    },
    MeanDepth {
        x: Var,
        depth: usize,
    },
    SumAll(Var),
    Bce {
        logits: Var,
        target: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
    Kl {
        mu_q: Var,
        lv_q: Var,
        mu_p: Var,
        lv_p: Var,
        batch: usize,
    },
    Reparam {
        mu: Var,
        lv: Var,
        eps: Vec<T>,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

/// Computation graph for one forward pass.
///
/// Nodes are appended in evaluation order; [`Graph::backward`] walks them in
/// reverse. Parameters are pulled lazily from an attached [`ParamStore`] and
/// each parameter maps to exactly one node, so weight sharing accumulates
/// gradients correctly.
pub struct Graph<'p, T> {
    pub(crate) nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Graph {
            nodes: Vec::new(),
            params: Some(params),
            param_vars: vec![None; params.len()],
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Node for a parameter of the attached store.
    ///
    /// Panics if the graph was built without a store.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::shape("backward", "single-element loss", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            // only leaf gradients are reported; intermediates are released
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
            }
        }
        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, delta: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv { x, w, b, geom } => {
                let batch = self.value(*x).shape()[0];
                let (dx, dw, db) = conv::conv_backward(
                    geom,
                    batch,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                let batch = self.value(*x).shape()[0];
                let (dx, dw, db) = conv::conv_transpose_backward(
                    geom,
                    batch,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&ix, &gv) in argmax.iter().zip(g) {
                    dx[ix] += gv;
                }
                acc(*x, dx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(*x, dx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = y.iter().zip(g).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
                acc(*x, dx);
            }
            Op::MulConst { x, c } => {
                acc(*x, g.iter().zip(c).map(|(&gv, &cv)| gv * cv).collect());
            }
            Op::Scale { x, s } => {
                acc(*x, g.iter().map(|&gv| gv * *s).collect());
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Concat { xs, inner } => {
                let total: usize = inner.iter().sum();
                let batch = g.len() / total;
                let mut parts: Vec<Vec<T>> = inner.iter().map(|&n| Vec::with_capacity(n * batch)).collect();
                for b in 0..batch {
                    let mut off = b * total;
                    for (part, &n) in parts.iter_mut().zip(inner) {
                        part.extend_from_slice(&g[off..off + n]);
                        off += n;
                    }
                }
                for (x, part) in xs.iter().zip(parts) {
                    acc(*x, part);
                }
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::RepeatDepth { x, depth, scale } => {
                let plane: usize = self.value(*x).shape()[2..].iter().product();
                let planes = self.value(*x).numel() / plane;
                let mut dx = vec![T::zero(); planes * plane];
                for p in 0..planes {
                    let dst = &mut dx[p * plane..(p + 1) * plane];
                    for z in 0..*depth {
                        let src = &g[(p * depth + z) * plane..(p * depth + z + 1) * plane];
                        dst.iter_mut().zip(src).for_each(|(a, &s)| *a += s);
                    }
                    dst.iter_mut().for_each(|a| *a *= *scale);
                }
                acc(*x, dx);
            }
            Op::MeanDepth { x, depth } => {
                let s = self.value(*x).shape();
                let plane = s[3] * s[4];
                let planes = g.len() / plane;
                let inv = T::one() / T::lit(*depth as f64);
                let mut dx = Vec::with_capacity(self.value(*x).numel());
                for p in 0..planes {
                    let src = &g[p * plane..(p + 1) * plane];
                    for _ in 0..*depth {
                        dx.extend(src.iter().map(|&v| v * inv));
                    }
                }
                acc(*x, dx);
            }
            Op::SumAll(x) => {
                acc(*x, vec![g[0]; self.value(*x).numel()]);
            }
            Op::Bce { logits, target } => {
                let z = self.value(*logits).data();
                let scale = g[0] / T::lit(z.len() as f64);
                let dx = z
                    .iter()
                    .zip(target)
                    .map(|(&zv, &y)| (stable_sigmoid(zv) - y) * scale)
                    .collect();
                acc(*logits, dx);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let scale = g[0] * T::lit(2.0 / p.len() as f64);
                acc(*pred, p.iter().zip(target).map(|(&pv, &t)| (pv - t) * scale).collect());
            }
            Op::Kl {
                mu_q,
                lv_q,
                mu_p,
                lv_p,
                batch,
            } => {
                let scale = g[0].as_f64() / *batch as f64;
                let (mq, lq, mp, lp) = (
                    self.value(*mu_q).data(),
                    self.value(*lv_q).data(),
                    self.value(*mu_p).data(),
                    self.value(*lv_p).data(),
                );
                let n = mq.len();
                let (mut dmq, mut dlq, mut dmp, mut dlp) = (
                    Vec::with_capacity(n),
                    Vec::with_capacity(n),
                    Vec::with_capacity(n),
                    Vec::with_capacity(n),
                );
                for j in 0..n {
                    let (lqc, lq_in) = clamp_logvar(lq[j].as_f64());
                    let (lpc, lp_in) = clamp_logvar(lp[j].as_f64());
                    let diff = mq[j].as_f64() - mp[j].as_f64();
                    let inv_vp = (-lpc).exp();
                    dmq.push(T::lit(scale * diff * inv_vp));
                    dmp.push(T::lit(-scale * diff * inv_vp));
                    let dq = if lq_in { 0.5 * ((lqc - lpc).exp() - 1.0) } else { 0.0 };
                    let dp = if lp_in {
                        0.5 * (1.0 - (lqc.exp() + diff * diff) * inv_vp)
                    } else {
                        0.0
                    };
                    dlq.push(T::lit(scale * dq));
                    dlp.push(T::lit(scale * dp));
                }
                acc(*mu_q, dmq);
                acc(*lv_q, dlq);
                acc(*mu_p, dmp);
                acc(*lv_p, dlp);
            }
            Op::Reparam { mu, lv, eps } => {
                acc(*mu, g.to_vec());
                let l = self.value(*lv).data();
                let dlv = l
                    .iter()
                    .zip(eps)
                    .zip(g)
                    .map(|((&lv, &e), &gv)| {
                        let (c, inside) = clamp_logvar(lv.as_f64());
                        if inside {
                            gv * e * T::lit(0.5 * (0.5 * c).exp())
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                acc(*lv, dlv);
            }
        }
    }
}

/// Clamped log-variance and whether the input was inside the clamp range.
#[inline]
pub(crate) fn clamp_logvar(lv: f64) -> (f64, bool) {
    if lv > LOGVAR_CLAMP {
        (LOGVAR_CLAMP, false)
    } else if lv < -LOGVAR_CLAMP {
        (-LOGVAR_CLAMP, false)
    } else {
        (lv, true)
    }
}

#[inline]
pub(crate) fn stable_sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to leaf or parameter `v`; `None`
    /// when `v` does not influence the loss, does not track gradients, or is
    /// an intermediate node.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameters that were pulled into the graph, with their gradient if it
    /// reached the loss.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&[T]>)> + '_ {
        self.params.iter().map(move |&(id, v)| (id, self.get(v)))
    }

    /// Dense per-parameter gradient list aligned with `store`; parameters
    /// absent from the graph get zeros.
    pub fn dense(&self, store: &ParamStore<T>) -> Vec<Vec<T>> {
        let mut out: Vec<Vec<T>> = store.ids().map(|id| vec![T::zero(); store.get(id).numel()]).collect();
        for &(id, v) in &self.params {
            if let Some(g) = self.get(v) {
                out[id.0].copy_from_slice(g);
            }
        }
        out
    }
}
