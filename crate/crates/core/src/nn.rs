//! Layer building blocks over [`Graph`]: parameter declaration with
//! seeded uniform fan-in initialization, convolutions and residual blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamSet, Real, Tensor, Var};

/// Draws weights uniformly from `(-b, b)`, `b = sqrt(6 / fan_in)`, in
/// declaration order from one seeded stream. Values are drawn in `f64`
/// and cast, so `f32` and `f64` models built from one seed agree.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<F: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<F> {
        let bound = (6.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| F::of(self.rng.gen_range(-bound..bound)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Conv {
    pub fn declare<F: Real>(
        ps: &mut ParamSet<F>,
        init: &mut Initializer,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            init.uniform(&[c_out, c_in, k, k], c_in * k * k),
        );
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self {
            weight,
            bias: Some(bias),
            c_in,
            c_out,
            k,
        }
    }

    /// A bias-free kernel whose fan-in is that of a wider convolution it is
    /// one input-channel block of.
    pub fn declare_block<F: Real>(
        ps: &mut ParamSet<F>,
        init: &mut Initializer,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        fan_in: usize,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), init.uniform(&[c_out, c_in, k, k], fan_in));
        Self {
            weight,
            bias: None,
            c_in,
            c_out,
            k,
        }
    }

    pub fn apply<F: Real>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.conv2d(x, w, b)
    }
}

/// `x + conv2(relu(conv1(x)))` with two 3×3 convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResBlock {
    pub fn declare<F: Real>(
        ps: &mut ParamSet<F>,
        init: &mut Initializer,
        name: &str,
        channels: usize,
    ) -> Self {
        Self {
            conv1: Conv::declare(ps, init, &format!("{name}.conv1"), channels, channels, 3),
            conv2: Conv::declare(ps, init, &format!("{name}.conv2"), channels, channels, 3),
        }
    }

    pub fn apply<F: Real>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, x: Var) -> Result<Var> {
        let h = self.conv1.apply(g, ps, x)?;
        let h = g.relu(h);
        let h = self.conv2.apply(g, ps, h)?;
        g.add(x, h)
    }
}

/// Element count of a convolution with bias.
pub fn conv_params(c_in: usize, c_out: usize, k: usize) -> usize {
    c_out * c_in * k * k + c_out
}

/// Multiply-add FLOPs (2 per tap) of a same-padded convolution.
pub fn conv_flops(c_in: usize, c_out: usize, k: usize, h: usize, w: usize) -> u64 {
    2 * (c_out * c_in * k * k * h * w) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_param_count() {
        let mut ps = ParamSet::<f32>::new();
        let mut init = Initializer::new(0);
        Conv::declare(&mut ps, &mut init, "c", 4, 4, 3);
        assert_eq!(ps.numel(), 148);
        assert_eq!(conv_params(4, 4, 3), 148);
    }

    #[test]
    fn init_bounds_and_precision_agreement() {
        let mut a = Initializer::new(7);
        let mut b = Initializer::new(7);
        let wa: Tensor<f64> = a.uniform(&[8, 3, 3, 3], 27);
        let wb: Tensor<f32> = b.uniform(&[8, 3, 3, 3], 27);
        let bound = (6.0f64 / 27.0).sqrt();
        assert!(wa.data().iter().all(|v| v.abs() < bound));
        assert_eq!(wa.cast::<f32>(), wb);
    }
}
