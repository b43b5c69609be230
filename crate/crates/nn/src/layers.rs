use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// Fully connected layer `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(in_dim)` initialisation; `gain` scales the weights.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f32,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f32).sqrt();
        let weight = store.add_uniform(
            format!("{name}.weight"),
            [in_dim, out_dim],
            bound * gain,
            rng,
        );
        let bias = store.add_uniform(format!("{name}.bias"), [out_dim], bound * gain, rng);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

/// NHWC 2-d convolution with zero padding.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        gain: f32,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel.0 * kernel.1 * in_channels;
        let bound = gain / (fan_in as f32).sqrt();
        let weight =
            store.add_uniform(format!("{name}.weight"), [fan_in, out_channels], bound, rng);
        let bias = store.add_uniform(format!("{name}.bias"), [out_channels], bound, rng);
        Self {
            weight,
            bias,
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
        }
    }

    /// 3x3, stride 1, "same" padding.
    pub fn same3<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        gain: f32,
        rng: &mut R,
    ) -> Self {
        Self::new(
            store,
            name,
            in_channels,
            out_channels,
            (3, 3),
            (1, 1),
            (1, 1),
            gain,
            rng,
        )
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, b, self.kernel, self.stride, self.padding)
    }
}
