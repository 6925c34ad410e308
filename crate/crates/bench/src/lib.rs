//! Fixtures shared by the criterion benches.

use esr_forge_core::bie::{BieIo, BieParams};
use esr_forge_core::nn::Initializer;
use esr_forge_core::sim::SceneSpec;
use esr_forge_core::tensor::{Graph, ParamSet, Tensor};

/// He-uniform noise, deterministic in `seed`.
pub fn noise(shape: &[usize], seed: u64) -> Tensor<f32> {
    Initializer::new(seed).uniform(shape, 6)
}

/// A BIE block with `c` channels and `m` structures plus its three inputs.
pub struct BieFixture {
    pub params: ParamSet<f32>,
    pub bie: BieParams,
    pub inputs: [Tensor<f32>; 3],
}

impl BieFixture {
    pub fn new(c: usize, m: usize, h: usize, w: usize, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let bie = BieParams::declare(&mut params, &mut Initializer::new(seed), "bie", c, m);
        let shape = [1, c, h, w];
        Self {
            params,
            bie,
            inputs: [noise(&shape, seed + 1), noise(&shape, seed + 2), noise(&shape, seed + 3)],
        }
    }

    pub fn io(&self, g: &mut Graph<f32>) -> BieIo {
        BieIo {
            h_a: g.constant(self.inputs[0].clone()),
            h_b: g.constant(self.inputs[1].clone()),
            h_int: g.constant(self.inputs[2].clone()),
        }
    }
}

/// The 32×32 moving bar used for simulator timings.
pub fn bench_scene() -> SceneSpec {
    SceneSpec::moving_bar(32, 32, 1.0, 8)
}
