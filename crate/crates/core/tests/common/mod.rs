//! Shared fixtures for the oracle test suites.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use relubab_core::lp::{LpProblem, Rel};
use relubab_core::network::{InputBox, Layer, Network};

/// A dense feed-forward net with the given layer widths, small enough that
/// sampling and enumeration oracles stay cheap. The final layer has one
/// output so the net is a property network.
pub fn random_dense_net(rng: &mut ChaCha8Rng, widths: &[usize]) -> Network {
    assert!(widths.len() >= 2);
    assert_eq!(*widths.last().unwrap(), 1);
    let layers = widths
        .windows(2)
        .map(|w| Layer::Dense {
            weight: Array2::from_shape_fn((w[1], w[0]), |_| rng.gen_range(-1.0..1.0)),
            bias: Array1::from_shape_fn(w[1], |_| rng.gen_range(-0.5..0.5)),
        })
        .collect();
    Network::new(layers).unwrap()
}

pub fn random_box(rng: &mut ChaCha8Rng, dim: usize) -> InputBox {
    let lower = Array1::from_shape_fn(dim, |_| rng.gen_range(-1.0..0.0));
    let width = Array1::from_shape_fn(dim, |_| rng.gen_range(0.2..1.5));
    let upper = &lower + &width;
    InputBox { lower, upper }
}

pub fn sample_in_box(rng: &mut ChaCha8Rng, domain: &InputBox) -> Array1<f64> {
    Array1::from_shape_fn(domain.dim(), |i| {
        rng.gen_range(domain.lower[i]..=domain.upper[i])
    })
}

/// A small LP with finite variable bounds (so the feasible region, if any,
/// is a bounded polytope) and a few random rows of every sense.
pub fn random_lp(rng: &mut ChaCha8Rng) -> LpProblem {
    let n = rng.gen_range(2..=4);
    let mut p = LpProblem::new(n);
    for j in 0..n {
        let lo = rng.gen_range(-3.0..0.0);
        let hi = lo + rng.gen_range(0.5..4.0);
        p.set_bounds(j, lo, hi);
        p.objective[j] = rng.gen_range(-2.0..2.0);
    }
    let rows = rng.gen_range(0..=5);
    for _ in 0..rows {
        let nz = rng.gen_range(1..=n);
        let mut cols: Vec<usize> = (0..n).collect();
        for k in 0..nz {
            let pick = rng.gen_range(k..n);
            cols.swap(k, pick);
        }
        let coeffs: Vec<(usize, f64)> = cols[..nz]
            .iter()
            .map(|&j| (j, rng.gen_range(-2.0..2.0)))
            .collect();
        let rel = match rng.gen_range(0..3) {
            0 => Rel::Le,
            1 => Rel::Ge,
            _ => Rel::Eq,
        };
        p.add_row(coeffs, rel, rng.gen_range(-2.0..2.0));
    }
    p
}

/// All pre-activation vectors of every hidden layer at `x`, before ReLU.
pub fn pre_activations(net: &Network, x: &Array1<f64>) -> Vec<Array1<f64>> {
    let mut pres = Vec::new();
    let mut cur = x.clone();
    for layer in net.layers() {
        let pre = layer.apply_vec(cur.view()) + layer.bias_flat();
        pres.push(pre.clone());
        cur = pre.mapv(|v| v.max(0.0));
    }
    pres
}
