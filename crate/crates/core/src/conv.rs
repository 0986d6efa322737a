//! 2-D convolution lowered to a single matrix product (im2col).
//!
//! The ndarray backend evaluates its native convolution and, above all, the convolution
//! gradients with direct loops; routing through `matmul` is one to two orders of magnitude
//! faster on CPU and stays differentiable through plain tensor ops.

use burn::module::{Module, Param};
use burn::tensor::backend::Backend;
use burn::tensor::{Tensor, TensorData};
use rand::{Rng, RngCore};

/// `U(−1/√fan_in, 1/√fan_in)` values from `rng`, the usual default for conv and linear layers.
pub fn uniform_fan_in<B: Backend, const D: usize>(
    shape: [usize; D],
    fan_in: usize,
    rng: &mut dyn RngCore,
    device: &B::Device,
) -> Param<Tensor<B, D>> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Param::from_tensor(Tensor::from_data(TensorData::new(values, shape), device))
}

/// Square-kernel convolution with symmetric zero padding. Weights use the usual
/// `[out, in, k, k]` layout.
#[derive(Module, Debug)]
pub struct Conv<B: Backend> {
    pub weight: Param<Tensor<B, 4>>,
    pub bias: Option<Param<Tensor<B, 1>>>,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl<B: Backend> Conv<B> {
    /// Weights and bias drawn from `U(−1/√fan_in, 1/√fan_in)` using `rng`, so the
    /// initialization depends only on the caller's generator.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut dyn RngCore,
        device: &B::Device,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = uniform_fan_in([cout, cin, kernel, kernel], fan_in, rng, device);
        let bias = bias.then(|| uniform_fan_in([cout], fan_in, rng, device));
        Self {
            weight,
            bias,
            kernel,
            stride: stride.max(1),
            padding,
        }
    }

    pub fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Every `stride`-th row and column of the `[B, C, s·ho, s·wo]` window starting at
    /// `(ky, kx)` of the padded input.
    fn window(&self, x: &Tensor<B, 4>, ky: usize, kx: usize, ho: usize, wo: usize) -> Tensor<B, 4> {
        let [b, c, _, _] = x.dims();
        let s = self.stride;
        let w = x.clone().slice([0..b, 0..c, ky..ky + s * ho, kx..kx + s * wo]);
        if s == 1 {
            return w;
        }
        w.reshape([b, c, ho, s, wo, s])
            .slice([0..b, 0..c, 0..ho, 0..1, 0..wo, 0..1])
            .reshape([b, c, ho, wo])
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let [b, c, h, w] = x.dims();
        let [cout, _, k, _] = self.weight.dims();
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let (p, s) = (self.padding, self.stride);
        // extra trailing zeros so every strided window is a whole number of strides
        let extra_h = (s * (ho - 1) + k + s - 1).saturating_sub(h + 2 * p);
        let extra_w = (s * (wo - 1) + k + s - 1).saturating_sub(w + 2 * p);
        let x = if p + extra_h + extra_w > 0 {
            x.pad((p, p + extra_w, p, p + extra_h), 0.0)
        } else {
            x
        };

        let cols = if k == 1 {
            self.window(&x, 0, 0, ho, wo).reshape([b, c, ho * wo])
        } else {
            let windows: Vec<Tensor<B, 5>> = (0..k * k)
                .map(|i| self.window(&x, i / k, i % k, ho, wo).unsqueeze_dim(2))
                .collect();
            Tensor::cat(windows, 2).reshape([b, c * k * k, ho * wo])
        };
        let cols = cols.swap_dims(1, 2).reshape([b * ho * wo, c * k * k]);
        let weight = self.weight.val().reshape([cout, c * k * k]).transpose();
        let mut out = cols.matmul(weight);
        if let Some(bias) = &self.bias {
            out = out + bias.val().unsqueeze_dim(0);
        }
        out.reshape([b, ho * wo, cout]).swap_dims(1, 2).reshape([b, cout, ho, wo])
    }
}
