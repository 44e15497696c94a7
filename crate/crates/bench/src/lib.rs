//! Fixtures shared by the benchmarks.

use candle_core::{Device, Tensor};
use ispshield_core::isp::{ColorMatrix, GammaCurve, IspParams};
use ispshield_core::{Domain, ImageTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `(batch, 3, size, size)` uniform noise in `[0, 1]`.
pub fn random_batch(batch: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..batch * 3 * size * size).map(|_| rng.gen()).collect();
    Tensor::from_vec(data, (batch, 3, size, size), &Device::Cpu).expect("shape matches data")
}

pub fn random_image(batch: usize, size: usize, seed: u64) -> ImageTensor {
    ImageTensor::new(random_batch(batch, size, seed), Domain::Srgb).expect("values in range")
}

/// A non-trivial camera: mixed CCM and a curve with a flat mid-tone band.
pub fn sample_params(knots: usize) -> IspParams {
    let ccm = ColorMatrix::new([[0.9, 0.1, 0.0], [0.05, 0.85, 0.1], [0.0, 0.2, 0.8]])
        .expect("finite entries");
    let outputs = GammaCurve::knot_grid(knots)
        .iter()
        .map(|&x| if (0.2..0.6).contains(&x) { 0.5 } else { x })
        .collect();
    IspParams {
        ccm,
        gamma: GammaCurve::new(outputs).expect("knots in range"),
    }
}
