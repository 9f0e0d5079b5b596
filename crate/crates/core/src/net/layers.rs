//! Parameterized building blocks. Each layer only stores parameter ids; the
//! values live in a [`ParameterStore`] so one layout serves any scalar type.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParameterStore};
use crate::scalar::Scalar;

/// He-uniform bound: weights get variance `2 / fan_in`, which keeps
/// activation scale roughly constant through ReLU stacks. Biases start at zero.
fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let w = store.insert_uniform(&format!("{name}.w"), &[d_out, d_in], he_bound(d_in), rng)?;
        let b = store.insert_constant(&format!("{name}.b"), &[d_out], 0.0)?;
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let w = store.insert_uniform(&format!("{name}.w"), &[c_out, c_in, kernel, kernel], he_bound(c_in * kernel * kernel), rng)?;
        let b = store.insert_constant(&format!("{name}.b"), &[c_out], 0.0)?;
        Ok(Conv2d { w, b, stride, pad })
    }

    /// 1x1 convolution.
    pub fn pointwise<T: Scalar>(
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        Self::new(store, rng, name, c_in, c_out, 1, 1, 0)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Self> {
        let w = store.insert_uniform(&format!("{name}.w"), &[c_in, c_out, kernel, kernel], he_bound(c_out * kernel * kernel), rng)?;
        let b = store.insert_constant(&format!("{name}.b"), &[c_out], 0.0)?;
        Ok(ConvTranspose2d {
            w,
            b,
            stride,
            pad,
            output_pad,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv_transpose2d(x, w, Some(b), self.stride, self.pad, self.output_pad)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.insert_constant(&format!("{name}.gamma"), &[dim], 1.0)?;
        let beta = store.insert_constant(&format!("{name}.beta"), &[dim], 0.0)?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore<T>, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, T::lit(Self::EPS))
    }
}
