//! DCHAT blocks (densely connected SVHAT layers with per-stream skip
//! compression and a 1x1x1 gate) and DCHAT groups.

use mtv_autograd::{Graph, Var};
use rand::Rng;

use crate::error::Result;
use crate::nn::{linear_count, Bound, Init, LEAKY_SLOPE};
use crate::svhat::{init_svhat, svhat_forward, svhat_param_count, LayerDims, SvhatState};
use crate::tokenizer::LevelPlan;

/// Channel count of a stream's dense state after `layers` layers.
pub fn dense_channels(d: &LayerDims, layers: usize) -> usize {
    d.embed + layers * d.skip
}

fn streams(d: &LayerDims) -> &'static [&'static str] {
    if d.cat.is_some() {
        &["ite", "cat"]
    } else {
        &["ite"]
    }
}

pub fn init_dchat_block<R: Rng>(init: &mut Init<R>, prefix: &str, d: &LayerDims, layers: usize, cross: bool) {
    for t in 0..layers {
        init_svhat(init, &format!("{prefix}.layer{t}"), d, cross && t == 0);
    }
    for s in streams(d) {
        for t in 0..layers {
            init.linear(&format!("{prefix}.skip_{s}{t}"), d.embed, d.skip);
        }
        init.linear(&format!("{prefix}.gate_{s}"), dense_channels(d, layers), d.embed);
    }
}

pub fn dchat_block_param_count(d: &LayerDims, layers: usize, cross: bool) -> usize {
    let svhat: usize = (0..layers).map(|t| svhat_param_count(d, cross && t == 0)).sum();
    let per_stream = layers * linear_count(d.embed, d.skip) + linear_count(dense_channels(d, layers), d.embed);
    svhat + streams(d).len() * per_stream
}

/// Runs `layers` SVHAT layers, compressing each layer's output per stream to
/// `C_skip` (linear + LeakyReLU) into a growing dense state
/// `[input, skip_1, ..., skip_T]`; a gate maps the dense state back to
/// `C_emb` and the block input is added. Odd layers use shifted windows when
/// `shift` is enabled; only the first layer sees `cross`.
#[allow(clippy::too_many_arguments)]
pub fn dchat_block(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    d: &LayerDims,
    plan: &LevelPlan,
    input: SvhatState,
    cross: Option<&SvhatState>,
    layers: usize,
    shift: bool,
) -> Result<SvhatState> {
    let mut dense_ite = vec![input.ites];
    let mut dense_cat: Vec<Var> = input.cats.into_iter().collect();
    let mut state = input;
    for t in 0..layers {
        let shifted = shift && t % 2 == 1;
        let c = if t == 0 { cross } else { None };
        state = svhat_forward(g, p, &format!("{prefix}.layer{t}"), d, plan, state, c, shifted)?;
        let s = p.linear(g, &format!("{prefix}.skip_ite{t}"), state.ites);
        dense_ite.push(g.leaky_relu(s, LEAKY_SLOPE));
        if let Some(cats) = state.cats {
            let s = p.linear(g, &format!("{prefix}.skip_cat{t}"), cats);
            dense_cat.push(g.leaky_relu(s, LEAKY_SLOPE));
        }
    }
    let gate = |g: &mut Graph, name: &str, dense: &[Var], residual: Var| {
        let cat = g.concat(dense, 2);
        let gated = p.linear(g, name, cat);
        g.add(gated, residual)
    };
    let ites = gate(g, &format!("{prefix}.gate_ite"), &dense_ite, input.ites);
    let cats = match input.cats {
        Some(c) => Some(gate(g, &format!("{prefix}.gate_cat"), &dense_cat, c)),
        None => None,
    };
    Ok(SvhatState { ites, cats })
}

/// Group of `n_blocks` chained blocks. Each block carries its own residual,
/// so a block that contributes nothing leaves the group output equal to its
/// input.
#[allow(clippy::too_many_arguments)]
pub fn dchat_group(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    d: &LayerDims,
    plan: &LevelPlan,
    input: SvhatState,
    cross: Option<&SvhatState>,
    n_blocks: usize,
    layers: usize,
    shift: bool,
) -> Result<SvhatState> {
    let mut state = input;
    for b in 0..n_blocks {
        state = dchat_block(g, p, &format!("{prefix}.block{b}"), d, plan, state, cross, layers, shift)?;
    }
    Ok(state)
}

pub fn init_dchat_group<R: Rng>(init: &mut Init<R>, prefix: &str, d: &LayerDims, n_blocks: usize, layers: usize, cross: bool) {
    for b in 0..n_blocks {
        init_dchat_block(init, &format!("{prefix}.block{b}"), d, layers, cross);
    }
}
