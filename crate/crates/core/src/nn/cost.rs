//! Analytic parameter and FLOP counts. One multiply-accumulate counts as two
//! FLOPs; normalization and activations are left out of the FLOP total.

use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul};

use crate::error::{Error, Result};
use crate::nn::Act;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerCost {
    pub params: u64,
    pub flops: u64,
    /// Output element count per image.
    pub activations: u64,
}

impl Add for LayerCost {
    type Output = LayerCost;

    fn add(self, o: LayerCost) -> LayerCost {
        LayerCost {
            params: self.params + o.params,
            flops: self.flops + o.flops,
            activations: self.activations + o.activations,
        }
    }
}

impl AddAssign for LayerCost {
    fn add_assign(&mut self, o: LayerCost) {
        *self = *self + o;
    }
}

impl Mul<u64> for LayerCost {
    type Output = LayerCost;

    fn mul(self, k: u64) -> LayerCost {
        LayerCost {
            params: self.params * k,
            flops: self.flops * k,
            activations: self.activations * k,
        }
    }
}

impl Sum for LayerCost {
    fn sum<I: Iterator<Item = LayerCost>>(iter: I) -> Self {
        iter.fold(LayerCost::default(), Add::add)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub has_bias: bool,
    pub activation: Act,
    pub with_batchnorm: bool,
}

impl ConvSpec {
    /// Conv + BN + activation with "same" padding and no bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize, stride: usize, activation: Act) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding: kernel_size / 2,
            groups: 1,
            has_bias: false,
            activation,
            with_batchnorm: true,
        }
    }

    pub fn depthwise(channels: usize, kernel_size: usize, stride: usize, activation: Act) -> Self {
        Self {
            groups: channels,
            ..Self::new(channels, channels, kernel_size, stride, activation)
        }
    }

    /// Plain convolution: bias, no normalization, no activation.
    pub fn plain(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        Self {
            has_bias: true,
            with_batchnorm: false,
            ..Self::new(in_channels, out_channels, kernel_size, 1, Act::Identity)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.groups >= 1
            && self.in_channels % self.groups == 0
            && self.out_channels % self.groups == 0
            && self.kernel_size >= 1
            && self.stride >= 1
            && self.in_channels >= 1
            && self.out_channels >= 1;
        if !ok {
            return Err(Error::Config(format!("invalid conv spec {self:?}")));
        }
        if let Act::LeakyRelu(a) = self.activation {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Config(format!("leaky slope {a} outside (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        let k = self.kernel_size;
        [self.out_channels, self.in_channels / self.groups, k, k]
    }

    pub fn weight_count(&self) -> u64 {
        self.weight_shape().iter().map(|&d| d as u64).product()
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |l: usize| (l + 2 * self.padding).saturating_sub(self.kernel_size) / self.stride + 1;
        (f(h), f(w))
    }
}

/// Cost of one convolution applied to an `h × w` input.
pub fn layer_cost(spec: &ConvSpec, h: usize, w: usize) -> LayerCost {
    let (ho, wo) = spec.out_hw(h, w);
    let co = spec.out_channels as u64;
    let weights = spec.weight_count();
    let params = weights + if spec.has_bias { co } else { 0 } + if spec.with_batchnorm { 2 * co } else { 0 };
    let positions = (ho * wo) as u64;
    LayerCost {
        params,
        flops: 2 * weights * positions,
        activations: co * positions,
    }
}

/// Dense layer over `tokens` rows.
pub fn linear_cost(tokens: usize, d_in: usize, d_out: usize, bias: bool) -> LayerCost {
    LayerCost {
        params: (d_in * d_out + if bias { d_out } else { 0 }) as u64,
        flops: 2 * (tokens * d_in * d_out) as u64,
        activations: (tokens * d_out) as u64,
    }
}

/// Parameter-free `[m, k] · [k, n]` product repeated `batch` times.
pub fn matmul_cost(batch: usize, m: usize, k: usize, n: usize) -> LayerCost {
    LayerCost {
        params: 0,
        flops: 2 * (batch * m * k * n) as u64,
        activations: (batch * m * n) as u64,
    }
}

/// Affine normalization over `features` channels: parameters only.
pub fn norm_cost(features: usize) -> LayerCost {
    LayerCost {
        params: 2 * features as u64,
        ..LayerCost::default()
    }
}
