//! Fixtures shared by the criterion benches.

use repgraph_core::analysis::{build_layer, Block, Geometry};
use repgraph_core::module::Layer;
use repgraph_core::{Result, Rng, Tensor4};

/// Square map sides swept by the scaling benches.
pub const SIDES: [usize; 3] = [16, 32, 48];

/// Channel widths small enough for a quick sweep.
pub fn geometry(side: usize) -> Geometry {
    Geometry::new(side, side, 64, 16, 9)
}

pub struct Fixture {
    pub input: Tensor4<f32>,
    pub layer: Box<dyn Layer<f32>>,
}

/// A random `block` and one random `(1, c, h, w)` input for it.
pub fn fixture(block: Block, geo: &Geometry, seed: u64) -> Result<Fixture> {
    let mut rng = Rng::new(seed);
    let input = rng.uniform_tensor((1, geo.c, geo.h, geo.w), -1.0, 1.0);
    let layer = build_layer(block, geo, &mut rng)?;
    Ok(Fixture { input, layer })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_run() {
        for block in Block::ALL {
            let f = fixture(block, &geometry(8), 1).unwrap();
            let y = f.layer.forward(&f.input).unwrap();
            assert_eq!(y.shape(), f.input.shape());
        }
    }
}
