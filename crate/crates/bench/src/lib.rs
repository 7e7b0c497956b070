//! Shared fixtures for the criterion benches: a mid-sized random property
//! network and its input box, drawn from a fixed seed so runs compare
//! against each other.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relubab_core::network::{InputBox, Layer, Network};

pub fn bench_net(seed: u64, widths: &[usize]) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = widths
        .windows(2)
        .map(|w| {
            let scale = 2.0 / (w[0] as f64).sqrt();
            Layer::Dense {
                weight: Array2::from_shape_fn((w[1], w[0]), |_| rng.gen_range(-scale..scale)),
                bias: Array1::from_shape_fn(w[1], |_| rng.gen_range(-0.3..0.3)),
            }
        })
        .collect();
    Network::new(layers).unwrap()
}

pub fn bench_box(seed: u64, dim: usize) -> InputBox {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lower = Array1::from_shape_fn(dim, |_| rng.gen_range(0.0..0.4));
    let width = Array1::from_shape_fn(dim, |_| rng.gen_range(0.1..0.4));
    let upper = &lower + &width;
    InputBox { lower, upper }
}
