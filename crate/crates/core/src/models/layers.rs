//! Parameterised layers as thin handles into a [`ParamStore`].

use drrseg_tensor::{Graph, ParamId, ParamStore, RngState, Tensor, Var};

use crate::error::Result;

pub(crate) type G<'p> = Graph<'p, f32>;

/// Registers parameters with He-normal weights and zero biases. Each
/// parameter draws from a stream keyed by its own name, so adding a branch
/// never changes the initial values of the others.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: RngState,
}

impl Init<'_> {
    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let mut rng = self.rng.derive(name);
        self.store.add_he(name, shape, fan_in, &mut rng)
    }

    pub fn conv3(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Conv3 {
        let taps: usize = kernel.iter().product();
        Conv3 {
            w: self.weight(
                &format!("{name}.weight"),
                &[cout, cin, kernel[0], kernel[1], kernel[2]],
                cin * taps,
            ),
            b: self.store.add_zeros(format!("{name}.bias"), &[cout]),
            stride,
            pad,
        }
    }

    pub fn conv3_same(&mut self, name: &str, cin: usize, cout: usize) -> Conv3 {
        self.conv3(name, cin, cout, [3; 3], [1; 3], [1; 3])
    }

    pub fn conv2(&mut self, name: &str, cin: usize, cout: usize, kernel: usize) -> Conv2 {
        Conv2 {
            w: self.weight(
                &format!("{name}.weight"),
                &[cout, cin, kernel, kernel],
                cin * kernel * kernel,
            ),
            b: self.store.add_zeros(format!("{name}.bias"), &[cout]),
            pad: kernel / 2,
        }
    }

    /// He-normal weights multiplied by `scale`.
    pub fn conv2_scaled(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, scale: f32) -> Conv2 {
        let c = self.conv2(name, cin, cout, kernel);
        self.store.get_mut(c.w).data_mut().iter_mut().for_each(|v| *v *= scale);
        c
    }

    /// Transposed conv; fan-in counts the taps that reach each output voxel.
    pub fn conv_t3(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> ConvT3 {
        let reach: usize = (0..3).map(|a| kernel[a].div_ceil(stride[a])).product();
        ConvT3 {
            w: self.weight(
                &format!("{name}.weight"),
                &[cin, cout, kernel[0], kernel[1], kernel[2]],
                cin * reach,
            ),
            b: self.store.add_zeros(format!("{name}.bias"), &[cout]),
            stride,
            pad,
        }
    }

    /// 1^3 conv to a single logit channel whose bias starts at the log-odds
    /// of `prior`, the expected foreground fraction.
    pub fn logit_head(&mut self, name: &str, cin: usize, prior: f64) -> Conv3 {
        let c = self.conv3(name, cin, 1, [1; 3], [1; 3], [0; 3]);
        let bias = (prior / (1.0 - prior)).ln() as f32;
        self.store.get_mut(c.b).data_mut().fill(bias);
        c
    }

    /// 3^3 conv that copies input channel `pass` to the single output and
    /// ignores the rest.
    pub fn conv3_passthrough(&mut self, name: &str, cin: usize, pass: usize) -> Conv3 {
        let mut w = Tensor::zeros(&[1, cin, 3, 3, 3]);
        w.data_mut()[pass * 27 + 13] = 1.0;
        Conv3 {
            w: self.store.add(format!("{name}.weight"), w),
            b: self.store.add_zeros(format!("{name}.bias"), &[1]),
            stride: [1; 3],
            pad: [1; 3],
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv3 {
    w: ParamId,
    b: ParamId,
    stride: [usize; 3],
    pad: [usize; 3],
}

impl Conv3 {
    pub fn fwd(&self, g: &mut G, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        Ok(g.conv3d(x, w, Some(b), self.stride, self.pad)?)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv2 {
    w: ParamId,
    b: ParamId,
    pad: usize,
}

impl Conv2 {
    pub fn fwd(&self, g: &mut G, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        Ok(g.conv2d(x, w, Some(b), [1, 1], [self.pad; 2])?)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvT3 {
    w: ParamId,
    b: ParamId,
    stride: [usize; 3],
    pad: [usize; 3],
}

impl ConvT3 {
    pub fn fwd(&self, g: &mut G, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        Ok(g.conv_transpose3d(x, w, Some(b), self.stride, self.pad, [0; 3])?)
    }
}

/// Two 3^3 convolutions, each followed by relu.
#[derive(Clone, Debug)]
pub(crate) struct Block3 {
    a: Conv3,
    b: Conv3,
}

impl Block3 {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        Block3 {
            a: init.conv3_same(&format!("{name}.0"), cin, cout),
            b: init.conv3_same(&format!("{name}.1"), cout, cout),
        }
    }

    pub fn fwd(&self, g: &mut G, x: Var) -> Result<Var> {
        let h = self.a.fwd(g, x)?;
        let h = g.relu(h);
        let h = self.b.fwd(g, h)?;
        Ok(g.relu(h))
    }
}

/// Two 3x3 convolutions, each followed by relu.
#[derive(Clone, Debug)]
pub(crate) struct Block2 {
    a: Conv2,
    b: Conv2,
}

impl Block2 {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        Block2 {
            a: init.conv2(&format!("{name}.0"), cin, cout, 3),
            b: init.conv2(&format!("{name}.1"), cout, cout, 3),
        }
    }

    pub fn fwd(&self, g: &mut G, x: Var) -> Result<Var> {
        let h = self.a.fwd(g, x)?;
        let h = g.relu(h);
        let h = self.b.fwd(g, h)?;
        Ok(g.relu(h))
    }
}
