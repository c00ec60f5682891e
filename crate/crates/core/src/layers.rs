//! Parameterized building blocks over the autodiff graph.

use rand::Rng;
use sparsefuse_tensor::{BoundParams, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::error::Result;

/// He-uniform values for a layer with `fan_in` inputs.
pub(crate) fn he_uniform<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}

/// Weight initialization of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// He-uniform, for layers followed by a ReLU.
    He,
    /// Uniform with unit gain, for linear outputs.
    Linear,
    /// All zeros, for the last layer of a residual branch.
    Zero,
}

/// 3x3 (or `k x k`) convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub ksize: usize,
}

impl Conv2dLayer {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        ksize: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::register_with(store, name, c_in, c_out, ksize, Init::He, rng)
    }

    pub fn register_with<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        ksize: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let shape = [c_out, c_in, ksize, ksize];
        let fan_in = c_in * ksize * ksize;
        let value = match init {
            Init::He => he_uniform(&shape, fan_in, rng),
            Init::Linear => he_uniform(&shape, 2 * fan_in, rng),
            Init::Zero => Tensor::zeros(&shape),
        };
        let weight = store.register(format!("{name}.weight"), value)?;
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Self {
            weight,
            bias,
            c_in,
            c_out,
            ksize,
        })
    }

    pub fn param_count(c_in: usize, c_out: usize, ksize: usize) -> usize {
        c_out * c_in * ksize * ksize + c_out
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: Var,
        stride: usize,
    ) -> Result<Var> {
        Ok(g.conv2d(x, p.var(self.weight), p.var(self.bias), stride)?)
    }

    pub fn forward_relu<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: Var,
        stride: usize,
    ) -> Result<Var> {
        let y = self.forward(g, p, x, stride)?;
        Ok(g.relu(y))
    }
}

/// Fully connected layer applied to the rows of an `R x in` matrix.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.register(
            format!("{name}.weight"),
            he_uniform(&[d_in, d_out], d_in, rng),
        )?;
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        Ok(g.add_row_bias(y, p.var(self.bias))?)
    }
}
