//! Layer-by-layer forward and backward embedding update rounds.

use super::features::GnnGraph;
use super::tape::{Tape, ValueId};
use super::Gnn;

pub(super) struct RoundOutputs {
    pub mu_hidden: Vec<ValueId>,
    #[allow(dead_code)]
    pub mu_input: ValueId,
    #[allow(dead_code)]
    pub mu_output: ValueId,
}

/// Runs `gnn.rounds` rounds of forward then backward updates over the graph,
/// starting from all-zero embeddings. Input embeddings are seeded from their
/// features only in the first forward pass and thereafter refreshed by the
/// backward pass.
pub(super) fn run_rounds(tape: &mut Tape<'_>, gnn: &Gnn, graph: &GnnGraph) -> RoundOutputs {
    let hidden = graph.z_act.len();
    let z0 = tape.leaf(graph.z_input.clone());
    let z_act: Vec<ValueId> = graph.z_act.iter().map(|z| tape.leaf(z.clone())).collect();
    let z_out = tape.leaf(graph.z_output.clone());
    let z0b = tape.leaf(graph.z_input_back.clone());

    let mut mu_input = None;
    let mut mu_hidden = vec![usize::MAX; hidden];
    let mut mu_output = usize::MAX;
    for round in 0..gnn.rounds {
        if round == 0 {
            mu_input = Some(gnn.mlps.f_inp.apply(tape, z0));
        }
        let mut below = mu_input.expect("seeded in round 0");
        for h in 0..hidden {
            let r = gnn.mlps.f_act_lf.apply(tape, z_act[h]);
            let r = tape.row_scale(r, graph.mask[h].clone());
            let e = tape.layer_map(below, h);
            let gated = gate(tape, graph, h, e);
            let n = gnn.mlps.f_act_nb.apply(tape, gated);
            let cat = tape.concat_cols(vec![r, n]);
            let mu = gnn.mlps.f_act_com.apply(tape, cat);
            mu_hidden[h] = mu;
            below = mu;
        }
        let r_out = gnn.mlps.f_out_lf.apply(tape, z_out);
        let e_out = tape.layer_map(below, hidden);
        let cat = tape.concat_cols(vec![r_out, e_out]);
        mu_output = gnn.mlps.f_out_com.apply(tape, cat);

        let mut above = mu_output;
        for h in (0..hidden).rev() {
            let rb = gnn.mlps.b_act_lf1.apply(tape, z_act[h]);
            let rb = tape.row_scale(rb, graph.mask[h].clone());
            let d0 = tape.row_scale(rb, graph.duals[h][0].clone());
            let d1 = tape.row_scale(rb, graph.duals[h][1].clone());
            let d2 = tape.row_scale(rb, graph.duals[h][2].clone());
            let cat = tape.concat_cols(vec![d0, d1, d2, rb]);
            let rbp = gnn.mlps.b_act_lf2.apply(tape, cat);
            let rbp = tape.row_scale(rbp, graph.mask[h].clone());
            let eb = back_message(tape, graph, h + 1, above);
            let gated = gate(tape, graph, h, eb);
            let nb = gnn.mlps.b_act_nb.apply(tape, gated);
            let cat = tape.concat_cols(vec![rbp, nb]);
            let mu = gnn.mlps.b_act_com.apply(tape, cat);
            mu_hidden[h] = mu;
            above = mu;
        }
        let r0 = gnn.mlps.b_inp_lf.apply(tape, z0b);
        let e0 = back_message(tape, graph, 0, above);
        let cat = tape.concat_cols(vec![r0, e0]);
        mu_input = Some(gnn.mlps.b_inp_com.apply(tape, cat));
    }
    RoundOutputs {
        mu_hidden,
        mu_input: mu_input.expect("at least one round"),
        mu_output,
    }
}

/// `[alpha * e, alpha' * e]`: the activation gate applied to a message.
fn gate(tape: &mut Tape<'_>, graph: &GnnGraph, h: usize, e: ValueId) -> ValueId {
    let ae = tape.row_scale(e, graph.alpha[h].clone());
    let ape = tape.row_scale(e, graph.alpha_prime[h].clone());
    tape.concat_cols(vec![ae, ape])
}

/// Transposed-weight message from the layer above, averaged by fan-out when
/// that layer is convolutional.
fn back_message(tape: &mut Tape<'_>, graph: &GnnGraph, layer: usize, above: ValueId) -> ValueId {
    let eb = tape.layer_map_t(above, layer);
    match &graph.inv_fanout[layer] {
        Some(inv) => tape.row_scale(eb, inv.clone()),
        None => eb,
    }
}
