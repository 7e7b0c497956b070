//! Sampling and ordering oracles for the bound-propagation methods.

mod common;

use common::{pre_activations, random_box, random_dense_net, sample_in_box};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relubab_core::bounds::{
    alpha_beta, interval_bounds, linbound_bounds, recompute_bounds_after_split, DecisionState,
    ReluDecisionMap,
};

#[test]
fn both_methods_are_sound_under_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(2001);
    for case in 0..12 {
        let widths: &[usize] = match case % 3 {
            0 => &[2, 4, 1],
            1 => &[3, 5, 4, 1],
            _ => &[2, 3, 3, 3, 1],
        };
        let net = random_dense_net(&mut rng, widths);
        let domain = random_box(&mut rng, widths[0]);
        let decisions = ReluDecisionMap::undecided(&net);
        let iv = interval_bounds(&net, &domain, &decisions).unwrap();
        let lb = linbound_bounds(&net, &domain, &decisions).unwrap();
        for _ in 0..10_000 {
            let x = sample_in_box(&mut rng, &domain);
            for (layer, pre) in pre_activations(&net, &x).iter().enumerate() {
                for (unit, &v) in pre.iter().enumerate() {
                    assert!(
                        iv.lower[layer][unit] <= v + 1e-9 && v <= iv.upper[layer][unit] + 1e-9,
                        "interval bound violated at layer {layer}, unit {unit}: \
                         {v} outside [{}, {}]",
                        iv.lower[layer][unit],
                        iv.upper[layer][unit]
                    );
                    assert!(
                        lb.lower[layer][unit] <= v + 1e-9 && v <= lb.upper[layer][unit] + 1e-9,
                        "linear bound violated at layer {layer}, unit {unit}: \
                         {v} outside [{}, {}]",
                        lb.lower[layer][unit],
                        lb.upper[layer][unit]
                    );
                }
            }
        }
    }
}

#[test]
fn linear_bounds_dominate_interval_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    for case in 0..50 {
        let widths: &[usize] = match case % 4 {
            0 => &[2, 4, 1],
            1 => &[3, 6, 4, 1],
            2 => &[4, 5, 5, 1],
            _ => &[2, 3, 3, 3, 1],
        };
        let net = random_dense_net(&mut rng, widths);
        let domain = random_box(&mut rng, widths[0]);
        let decisions = ReluDecisionMap::undecided(&net);
        let iv = interval_bounds(&net, &domain, &decisions).unwrap();
        let lb = linbound_bounds(&net, &domain, &decisions).unwrap();
        for layer in 0..iv.num_layers() {
            for unit in 0..iv.lower[layer].len() {
                assert!(
                    lb.lower[layer][unit] >= iv.lower[layer][unit] - 1e-9,
                    "case {case}: linear lower looser than interval at ({layer}, {unit})"
                );
                assert!(
                    lb.upper[layer][unit] <= iv.upper[layer][unit] + 1e-9,
                    "case {case}: linear upper looser than interval at ({layer}, {unit})"
                );
            }
        }
    }
}

#[test]
fn splits_never_loosen_later_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(2003);
    for _ in 0..25 {
        let net = random_dense_net(&mut rng, &[3, 5, 4, 1]);
        let domain = random_box(&mut rng, 3);
        let decisions = ReluDecisionMap::undecided(&net);
        let parent = linbound_bounds(&net, &domain, &decisions).unwrap();
        for (layer, unit) in parent.ambiguous_nodes(&decisions) {
            for state in [DecisionState::Blocked, DecisionState::Passing] {
                let mut child_dec = decisions.clone();
                child_dec.set(layer, unit, state);
                let child =
                    match recompute_bounds_after_split(&net, &domain, &child_dec, &parent, layer) {
                        Ok(c) => c,
                        Err(_) => continue,
                    };
                for later in 0..parent.num_layers() {
                    for u in 0..parent.lower[later].len() {
                        assert!(
                            child.lower[later][u] >= parent.lower[later][u] - 1e-9,
                            "split ({layer},{unit},{state:?}) loosened lower at ({later},{u})"
                        );
                        assert!(
                            child.upper[later][u] <= parent.upper[later][u] + 1e-9,
                            "split ({layer},{unit},{state:?}) loosened upper at ({later},{u})"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn stable_networks_get_exact_output_bounds() {
    // When every ReLU is stable on the box the network is one affine map,
    // so the relaxation has no slack: the backward pass must reproduce the
    // closed-form extrema of that map, and the interval bound contains it.
    let mut rng = ChaCha8Rng::seed_from_u64(2004);
    for case in 0..20 {
        let mut net = random_dense_net(&mut rng, &[2, 3, 1]);
        let domain = random_box(&mut rng, 2);
        // Shift first-layer biases so each unit is decidedly passing or
        // blocked over the whole box.
        let loose = interval_bounds(&net, &domain, &ReluDecisionMap::undecided(&net)).unwrap();
        let mut mask = [0.0f64; 3];
        {
            let layers = net.layers().to_vec();
            let relubab_core::network::Layer::Dense { weight, mut bias } = layers[0].clone()
            else {
                unreachable!()
            };
            for unit in 0..3 {
                if unit % 2 == 0 {
                    bias[unit] += -loose.lower[0][unit] + 0.1;
                    mask[unit] = 1.0;
                } else {
                    bias[unit] += -loose.upper[0][unit] - 0.1;
                }
            }
            let mut new_layers = layers;
            new_layers[0] = relubab_core::network::Layer::Dense { weight, bias };
            net = relubab_core::network::Network::new(new_layers).unwrap();
        }
        let decisions = ReluDecisionMap::undecided(&net);
        let iv = interval_bounds(&net, &domain, &decisions).unwrap();
        let lb = linbound_bounds(&net, &domain, &decisions).unwrap();
        assert!(iv.ambiguous_nodes(&decisions).is_empty(), "case {case}");

        // Closed form of the composed affine map out = c . x + d.
        let (w1, b1) = match &net.layers()[0] {
            relubab_core::network::Layer::Dense { weight, bias } => (weight, bias),
            _ => unreachable!(),
        };
        let (w2, b2) = match &net.layers()[1] {
            relubab_core::network::Layer::Dense { weight, bias } => (weight, bias),
            _ => unreachable!(),
        };
        let mut c = [0.0f64; 2];
        let mut d = b2[0];
        for h in 0..3 {
            d += w2[[0, h]] * mask[h] * b1[h];
            for j in 0..2 {
                c[j] += w2[[0, h]] * mask[h] * w1[[h, j]];
            }
        }
        let mut exact_lo = d;
        let mut exact_hi = d;
        for j in 0..2 {
            exact_lo += (c[j] * domain.lower[j]).min(c[j] * domain.upper[j]);
            exact_hi += (c[j] * domain.lower[j]).max(c[j] * domain.upper[j]);
        }
        let out = net.depth() - 1;
        assert!(
            (lb.lower[out][0] - exact_lo).abs() < 1e-9,
            "case {case}: backward lower {} vs exact {exact_lo}",
            lb.lower[out][0]
        );
        assert!(
            (lb.upper[out][0] - exact_hi).abs() < 1e-9,
            "case {case}: backward upper {} vs exact {exact_hi}",
            lb.upper[out][0]
        );
        assert!(iv.lower[out][0] <= exact_lo + 1e-9);
        assert!(iv.upper[out][0] >= exact_hi - 1e-9);
    }
}

#[test]
fn relaxation_slope_is_continuous_at_the_passing_boundary() {
    let u = 2.0;
    let mut prev_alpha = 0.0;
    for k in 1..12 {
        let l = -(10f64).powi(-k);
        let p = alpha_beta(l, u).unwrap();
        assert!(p.alpha >= prev_alpha, "alpha must increase as l -> 0-");
        prev_alpha = p.alpha;
    }
    let near = alpha_beta(-1e-12, u).unwrap();
    assert!((near.alpha - 1.0).abs() < 1e-9);
    assert!(near.beta.abs() < 1e-9);
    let at = alpha_beta(0.0, u).unwrap();
    assert_eq!(at.alpha, 1.0);
    assert_eq!(at.beta, 0.0);
}
